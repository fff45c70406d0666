"""Per-stage Q-learning modules behind one interface.

Four realizations: DQN for discrete actions, DDPG and TD3 for continuous
actions, and a tabular backend. The tabular value-iteration solvers at the
bottom provide the exact reference solution that the stacked decomposition
is checked against.

Every module follows the same bootstrap truncation rule: the temporal
difference target is the stored reward alone whenever the transition ended
the episode or crossed a stage boundary (the cross-stage value is already
folded into that reward), and r + gamma * (target-network value) otherwise.
value() is always served from target parameters because it is the quantity
earlier stages bootstrap from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidBatchError, InvalidConfigError, NumericError, StagedStructureError
from .nncore import (
    MlpParams,
    adam_init,
    adam_step,
    clip_grad_norm,
    mlp_backward,
    mlp_forward,
    mlp_init,
    soft_update,
)
from .staged_mdp import Box, Discrete, Transition


@dataclass
class LearnStats:
    critic_loss: float
    actor_loss: float | None = None
    grad_norm: float = 0.0


@dataclass
class TransitionBatch:
    """Column-wise view of same-stage transitions."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    transitioned: np.ndarray
    stage: int

    def __len__(self) -> int:
        return self.obs.shape[0]

    @classmethod
    def from_transitions(cls, transitions: list[Transition]) -> "TransitionBatch":
        if not transitions:
            raise InvalidBatchError("empty batch")
        stages = {t.stage for t in transitions}
        if len(stages) != 1:
            raise InvalidBatchError(f"batch mixes stages {sorted(stages)}")
        first = transitions[0]
        if np.isscalar(first.action) or np.ndim(first.action) == 0:
            actions = np.array([int(t.action) for t in transitions], dtype=np.int64)
        else:
            actions = np.stack([np.asarray(t.action, dtype=np.float64) for t in transitions])
        return cls(
            obs=np.stack([t.state_obs for t in transitions]).astype(np.float64),
            actions=actions,
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_obs=np.stack([t.next_state_obs for t in transitions]).astype(np.float64),
            terminal=np.array([t.terminal for t in transitions], dtype=bool),
            transitioned=np.array([t.stage_transitioned for t in transitions], dtype=bool),
            stage=first.stage,
        )


class TruncationMonitor:
    """Counts how often the y = r truncation rule was applied and verified.

    Kept process-global so a full training run can be audited afterwards:
    zero violations means every sampled target obeyed the rule bitwise.
    """

    def __init__(self):
        self.checked = 0
        self.violations = 0

    def reset(self):
        self.checked = 0
        self.violations = 0

    def record(self, truncated: np.ndarray, y: np.ndarray, rewards: np.ndarray):
        n = int(truncated.sum())
        if n:
            self.checked += n
            self.violations += int(np.sum(y[truncated] != rewards[truncated]))


truncation_monitor = TruncationMonitor()


def _td_targets(
    rewards: np.ndarray, bootstrap: np.ndarray, terminal: np.ndarray, transitioned: np.ndarray
) -> np.ndarray:
    """y = r on episode end or stage transition, else r + bootstrap."""
    truncated = terminal | transitioned
    y = np.where(truncated, rewards, rewards + bootstrap)
    truncation_monitor.record(truncated, y, rewards)
    return y


@dataclass
class EpsilonSchedule:
    """Linear decay from start to end over decay_steps exploration calls."""

    start: float = 1.0
    end: float = 0.05
    decay_steps: int = 5000

    def value(self, t: int) -> float:
        if self.decay_steps <= 0:
            return self.end
        frac = min(1.0, t / self.decay_steps)
        return self.start + frac * (self.end - self.start)


class QModule:
    """Interface shared by all per-stage learners.

    act(obs, explore, rng) selects an action; with explore=False it is
    deterministic given parameters. value(obs) is the state value used by
    the previous stage's reward bonus. learn(batch, gamma, rng) performs one
    update and reports pre-update losses.
    """

    stage: int = 0

    def act(self, obs: np.ndarray, explore: bool, rng: np.random.Generator):
        raise NotImplementedError

    def value(self, obs: np.ndarray) -> float:
        raise NotImplementedError

    def learn(self, batch: TransitionBatch, gamma: float, rng: np.random.Generator) -> LearnStats:
        raise NotImplementedError

    def sync_targets(self, tau: float | None = None):
        raise NotImplementedError

    def _check_batch(self, batch: TransitionBatch):
        if len(batch) == 0:
            raise InvalidBatchError("empty batch")
        if self.stage and batch.stage != self.stage:
            raise InvalidBatchError(f"batch from stage {batch.stage} fed to stage {self.stage} module")

    # checkpoint support
    def snapshot(self) -> tuple[dict, dict[str, np.ndarray]]:
        raise NotImplementedError

    def restore(self, meta: dict, arrays: dict[str, np.ndarray]):
        raise NotImplementedError


def _mlp_arrays(prefix: str, params: MlpParams) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def _load_mlp_arrays(prefix: str, params: MlpParams, arrays: dict[str, np.ndarray]):
    for i in range(len(params.weights)):
        params.weights[i] = arrays[f"{prefix}.w{i}"].reshape(params.weights[i].shape).copy()
        params.biases[i] = arrays[f"{prefix}.b{i}"].reshape(params.biases[i].shape).copy()


def _adam_arrays(prefix: str, state) -> dict[str, np.ndarray]:
    out = {}
    for i, (mw, vw) in enumerate(zip(state.m_weights, state.v_weights)):
        out[f"{prefix}.mw{i}"] = mw
        out[f"{prefix}.vw{i}"] = vw
    for i, (mb, vb) in enumerate(zip(state.m_biases, state.v_biases)):
        out[f"{prefix}.mb{i}"] = mb
        out[f"{prefix}.vb{i}"] = vb
    return out


def _load_adam_arrays(prefix: str, state, arrays: dict[str, np.ndarray]):
    for i in range(len(state.m_weights)):
        state.m_weights[i] = arrays[f"{prefix}.mw{i}"].reshape(state.m_weights[i].shape).copy()
        state.v_weights[i] = arrays[f"{prefix}.vw{i}"].reshape(state.v_weights[i].shape).copy()
        state.m_biases[i] = arrays[f"{prefix}.mb{i}"].reshape(state.m_biases[i].shape).copy()
        state.v_biases[i] = arrays[f"{prefix}.vb{i}"].reshape(state.v_biases[i].shape).copy()


class DqnModule(QModule):
    def __init__(
        self,
        obs_dim: int,
        n_actions: int,
        hidden: tuple[int, ...] = (64, 64),
        lr: float = 1e-3,
        tau: float = 0.005,
        grad_clip: float = 10.0,
        epsilon: EpsilonSchedule | None = None,
        seed: int = 0,
        stage: int = 0,
    ):
        self.n_actions = n_actions
        self.lr = lr
        self.tau = tau
        self.grad_clip = grad_clip
        self.epsilon = epsilon or EpsilonSchedule()
        self.stage = stage
        self.online = mlp_init([obs_dim, *hidden, n_actions], "relu", "linear", seed=seed)
        self.target = self.online.copy()
        self.adam = adam_init(self.online)
        self.explore_calls = 0

    def current_epsilon(self) -> float:
        return self.epsilon.value(self.explore_calls)

    def act(self, obs: np.ndarray, explore: bool, rng: np.random.Generator) -> int:
        """Epsilon-greedy on explore, greedy (lowest index wins ties) otherwise.

        An exploring call consumes exactly one uniform draw, plus one integer
        draw when it lands in the random branch.
        """
        if explore:
            eps = self.epsilon.value(self.explore_calls)
            self.explore_calls += 1
            if rng.random() < eps:
                return int(rng.integers(self.n_actions))
        q = mlp_forward(self.online, np.asarray(obs, dtype=np.float64))
        return int(np.argmax(q))

    def value(self, obs: np.ndarray) -> float:
        q = mlp_forward(self.target, np.asarray(obs, dtype=np.float64))
        return float(np.max(q))

    def learn(self, batch: TransitionBatch, gamma: float, rng: np.random.Generator | None = None) -> LearnStats:
        self._check_batch(batch)
        if batch.actions.dtype.kind != "i":
            raise InvalidBatchError("DQN expects integer actions")
        n = len(batch)
        idx = np.arange(n)
        q_all = mlp_forward(self.online, batch.obs)
        q_sa = q_all[idx, batch.actions]
        q_next = mlp_forward(self.target, batch.next_obs)
        y = _td_targets(batch.rewards, gamma * q_next.max(axis=1), batch.terminal, batch.transitioned)
        err = q_sa - y
        loss = float(np.mean(err * err))
        upstream = np.zeros_like(q_all)
        upstream[idx, batch.actions] = 2.0 * err / n
        grads = mlp_backward(self.online, batch.obs, upstream)
        grads, norm = clip_grad_norm(grads, self.grad_clip)
        self.online, self.adam = adam_step(self.adam, self.online, grads, self.lr)
        self.target = soft_update(self.target, self.online, self.tau)
        return LearnStats(critic_loss=loss, grad_norm=norm)

    def sync_targets(self, tau: float | None = None):
        self.target = soft_update(self.target, self.online, self.tau if tau is None else tau)

    def snapshot(self):
        meta = {"explore_calls": self.explore_calls, "adam_step": self.adam.step_count}
        arrays = {}
        arrays.update(_mlp_arrays("online", self.online))
        arrays.update(_mlp_arrays("target", self.target))
        arrays.update(_adam_arrays("adam", self.adam))
        return meta, arrays

    def restore(self, meta, arrays):
        self.explore_calls = int(meta["explore_calls"])
        _load_mlp_arrays("online", self.online, arrays)
        _load_mlp_arrays("target", self.target, arrays)
        _load_adam_arrays("adam", self.adam, arrays)
        self.adam.step_count = int(meta["adam_step"])


class _SquashedActor:
    """Actor MLP with tanh output mapped affinely onto an action box."""

    def __init__(self, obs_dim: int, space: Box, hidden: tuple[int, ...], seed: int):
        self.low = np.array(space.low, dtype=np.float64)
        self.high = np.array(space.high, dtype=np.float64)
        self.mid = 0.5 * (self.low + self.high)
        self.half = 0.5 * (self.high - self.low)
        self.net = mlp_init([obs_dim, *hidden, space.dim], "relu", "tanh", seed=seed)

    def __call__(self, params: MlpParams, obs: np.ndarray) -> np.ndarray:
        return self.mid + self.half * mlp_forward(params, obs)


class DdpgModule(QModule):
    def __init__(
        self,
        obs_dim: int,
        action_space: Box,
        hidden: tuple[int, ...] = (64, 64),
        actor_lr: float = 1e-4,
        critic_lr: float = 1e-3,
        tau: float = 0.005,
        noise_std_frac: float = 0.1,
        grad_clip: float = 10.0,
        seed: int = 0,
        stage: int = 0,
    ):
        self.obs_dim = obs_dim
        self.space = action_space
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.tau = tau
        self.grad_clip = grad_clip
        self.stage = stage
        self._squash = _SquashedActor(obs_dim, action_space, hidden, seed)
        self.actor = self._squash.net
        self.actor_target = self.actor.copy()
        self.critic = mlp_init([obs_dim + action_space.dim, *hidden, 1], "relu", "linear", seed=seed + 1)
        self.critic_target = self.critic.copy()
        self.actor_adam = adam_init(self.actor)
        self.critic_adam = adam_init(self.critic)
        self.noise_std = noise_std_frac * (self._squash.high - self._squash.low)

    @property
    def _low(self):
        return self._squash.low

    @property
    def _high(self):
        return self._squash.high

    def act(self, obs: np.ndarray, explore: bool, rng: np.random.Generator) -> np.ndarray:
        a = self._squash(self.actor, np.asarray(obs, dtype=np.float64))
        if explore:
            a = a + self.noise_std * rng.standard_normal(self.space.dim)
        return np.clip(a, self._low, self._high)

    def value(self, obs: np.ndarray) -> float:
        obs = np.asarray(obs, dtype=np.float64)
        a = self._squash(self.actor_target, obs)
        q = mlp_forward(self.critic_target, np.concatenate([obs, a]))
        return float(q[0])

    def _critic_step(self, critic, adam, cin, y, lr):
        q = mlp_forward(critic, cin)[:, 0]
        err = q - y
        loss = float(np.mean(err * err))
        upstream = (2.0 * err / len(y))[:, None]
        grads = mlp_backward(critic, cin, upstream)
        grads, norm = clip_grad_norm(grads, self.grad_clip)
        new_critic, new_adam = adam_step(adam, critic, grads, lr)
        return new_critic, new_adam, loss, norm

    def _actor_step(self, critic, obs):
        """Ascend the online critic's value of the actor's own actions."""
        a_pi = self._squash(self.actor, obs)
        cin = np.hstack([obs, a_pi])
        q_pi = mlp_forward(critic, cin)[:, 0]
        actor_loss = float(-np.mean(q_pi))
        upstream = np.full((len(obs), 1), -1.0 / len(obs))
        _, din = mlp_backward(critic, cin, upstream, return_input_grad=True)
        da = din[:, self.obs_dim :]
        agrads = mlp_backward(self.actor, obs, da * self._squash.half)
        agrads, _ = clip_grad_norm(agrads, self.grad_clip)
        self.actor, self.actor_adam = adam_step(self.actor_adam, self.actor, agrads, self.actor_lr)
        return actor_loss

    def learn(self, batch: TransitionBatch, gamma: float, rng: np.random.Generator | None = None) -> LearnStats:
        self._check_batch(batch)
        a_next = self._squash(self.actor_target, batch.next_obs)
        q_next = mlp_forward(self.critic_target, np.hstack([batch.next_obs, a_next]))[:, 0]
        y = _td_targets(batch.rewards, gamma * q_next, batch.terminal, batch.transitioned)
        cin = np.hstack([batch.obs, batch.actions.reshape(len(batch), -1)])
        self.critic, self.critic_adam, loss, norm = self._critic_step(
            self.critic, self.critic_adam, cin, y, self.critic_lr
        )
        actor_loss = self._actor_step(self.critic, batch.obs)
        self.sync_targets()
        return LearnStats(critic_loss=loss, actor_loss=actor_loss, grad_norm=norm)

    def sync_targets(self, tau: float | None = None):
        t = self.tau if tau is None else tau
        self.actor_target = soft_update(self.actor_target, self.actor, t)
        self.critic_target = soft_update(self.critic_target, self.critic, t)

    def snapshot(self):
        meta = {
            "actor_adam_step": self.actor_adam.step_count,
            "critic_adam_step": self.critic_adam.step_count,
        }
        arrays = {}
        arrays.update(_mlp_arrays("actor", self.actor))
        arrays.update(_mlp_arrays("actor_target", self.actor_target))
        arrays.update(_mlp_arrays("critic", self.critic))
        arrays.update(_mlp_arrays("critic_target", self.critic_target))
        arrays.update(_adam_arrays("actor_adam", self.actor_adam))
        arrays.update(_adam_arrays("critic_adam", self.critic_adam))
        return meta, arrays

    def restore(self, meta, arrays):
        _load_mlp_arrays("actor", self.actor, arrays)
        _load_mlp_arrays("actor_target", self.actor_target, arrays)
        _load_mlp_arrays("critic", self.critic, arrays)
        _load_mlp_arrays("critic_target", self.critic_target, arrays)
        _load_adam_arrays("actor_adam", self.actor_adam, arrays)
        _load_adam_arrays("critic_adam", self.critic_adam, arrays)
        self.actor_adam.step_count = int(meta["actor_adam_step"])
        self.critic_adam.step_count = int(meta["critic_adam_step"])


class Td3Module(DdpgModule):
    """DDPG plus twin critics, target-policy smoothing, delayed actor updates."""

    def __init__(
        self,
        obs_dim: int,
        action_space: Box,
        hidden: tuple[int, ...] = (64, 64),
        actor_lr: float = 1e-4,
        critic_lr: float = 1e-3,
        tau: float = 0.005,
        noise_std_frac: float = 0.1,
        grad_clip: float = 10.0,
        policy_delay: int = 2,
        target_noise_std_frac: float = 0.2,
        target_noise_clip_frac: float = 0.5,
        seed: int = 0,
        stage: int = 0,
    ):
        super().__init__(
            obs_dim, action_space, hidden, actor_lr, critic_lr, tau, noise_std_frac,
            grad_clip, seed=seed, stage=stage,
        )
        self.policy_delay = policy_delay
        self.target_noise_std = target_noise_std_frac * self._squash.half
        self.target_noise_clip = target_noise_clip_frac * self._squash.half
        self.critic2 = mlp_init(
            [obs_dim + action_space.dim, *hidden, 1], "relu", "linear", seed=seed + 2
        )
        self.critic2_target = self.critic2.copy()
        self.critic2_adam = adam_init(self.critic2)
        self.update_count = 0

    def value(self, obs: np.ndarray) -> float:
        """Clipped double-Q value from target networks."""
        obs = np.asarray(obs, dtype=np.float64)
        a = self._squash(self.actor_target, obs)
        cin = np.concatenate([obs, a])
        q1 = mlp_forward(self.critic_target, cin)[0]
        q2 = mlp_forward(self.critic2_target, cin)[0]
        return float(min(q1, q2))

    def learn(self, batch: TransitionBatch, gamma: float, rng: np.random.Generator | None = None) -> LearnStats:
        self._check_batch(batch)
        if rng is None:
            raise InvalidConfigError("TD3 target smoothing needs a random generator")
        self.update_count += 1
        n = len(batch)
        noise = self.target_noise_std * rng.standard_normal((n, self.space.dim))
        noise = np.clip(noise, -self.target_noise_clip, self.target_noise_clip)
        a_next = np.clip(self._squash(self.actor_target, batch.next_obs) + noise, self._low, self._high)
        nin = np.hstack([batch.next_obs, a_next])
        q1 = mlp_forward(self.critic_target, nin)[:, 0]
        q2 = mlp_forward(self.critic2_target, nin)[:, 0]
        y = _td_targets(batch.rewards, gamma * np.minimum(q1, q2), batch.terminal, batch.transitioned)
        cin = np.hstack([batch.obs, batch.actions.reshape(n, -1)])
        self.critic, self.critic_adam, loss1, norm = self._critic_step(
            self.critic, self.critic_adam, cin, y, self.critic_lr
        )
        self.critic2, self.critic2_adam, loss2, _ = self._critic_step(
            self.critic2, self.critic2_adam, cin, y, self.critic_lr
        )
        actor_loss = None
        if self.update_count % self.policy_delay == 0:
            actor_loss = self._actor_step(self.critic, batch.obs)
        self.sync_targets()
        return LearnStats(critic_loss=0.5 * (loss1 + loss2), actor_loss=actor_loss, grad_norm=norm)

    def sync_targets(self, tau: float | None = None):
        super().sync_targets(tau)
        t = self.tau if tau is None else tau
        self.critic2_target = soft_update(self.critic2_target, self.critic2, t)

    def snapshot(self):
        meta, arrays = super().snapshot()
        meta["critic2_adam_step"] = self.critic2_adam.step_count
        meta["update_count"] = self.update_count
        arrays.update(_mlp_arrays("critic2", self.critic2))
        arrays.update(_mlp_arrays("critic2_target", self.critic2_target))
        arrays.update(_adam_arrays("critic2_adam", self.critic2_adam))
        return meta, arrays

    def restore(self, meta, arrays):
        super().restore(meta, arrays)
        _load_mlp_arrays("critic2", self.critic2, arrays)
        _load_mlp_arrays("critic2_target", self.critic2_target, arrays)
        _load_adam_arrays("critic2_adam", self.critic2_adam, arrays)
        self.critic2_adam.step_count = int(meta["critic2_adam_step"])
        self.update_count = int(meta["update_count"])


class TabularQModule(QModule):
    """Q-learning on a hash table keyed by the observation bytes.

    The table plays both the online and the target role; value() therefore
    reads the same entries learn() writes.
    """

    def __init__(
        self,
        n_actions: int,
        lr: float = 0.2,
        epsilon: EpsilonSchedule | None = None,
        stage: int = 0,
    ):
        self.n_actions = n_actions
        self.lr = lr
        self.epsilon = epsilon or EpsilonSchedule()
        self.stage = stage
        self.table: dict[bytes, np.ndarray] = {}
        self.explore_calls = 0

    @staticmethod
    def _key(obs: np.ndarray) -> bytes:
        return np.ascontiguousarray(obs, dtype=np.float64).tobytes()

    def _row(self, obs: np.ndarray) -> np.ndarray:
        key = self._key(obs)
        row = self.table.get(key)
        if row is None:
            row = np.zeros(self.n_actions)
            self.table[key] = row
        return row

    def act(self, obs: np.ndarray, explore: bool, rng: np.random.Generator) -> int:
        if explore:
            eps = self.epsilon.value(self.explore_calls)
            self.explore_calls += 1
            if rng.random() < eps:
                return int(rng.integers(self.n_actions))
        row = self.table.get(self._key(obs))
        if row is None:
            return 0
        return int(np.argmax(row))

    def value(self, obs: np.ndarray) -> float:
        row = self.table.get(self._key(obs))
        return 0.0 if row is None else float(np.max(row))

    def learn(self, batch: TransitionBatch, gamma: float, rng: np.random.Generator | None = None) -> LearnStats:
        self._check_batch(batch)
        truncated = batch.terminal | batch.transitioned
        sq_err = 0.0
        for i in range(len(batch)):
            row = self._row(batch.obs[i])
            a = int(batch.actions[i])
            if truncated[i]:
                y = batch.rewards[i]
            else:
                y = batch.rewards[i] + gamma * self.value(batch.next_obs[i])
            truncation_monitor.record(
                truncated[i : i + 1], np.array([y]), batch.rewards[i : i + 1]
            )
            delta = y - row[a]
            sq_err += delta * delta
            row[a] += self.lr * delta
        return LearnStats(critic_loss=sq_err / len(batch))

    def sync_targets(self, tau: float | None = None):
        pass  # single table; nothing to synchronize

    def seed_from_table(self, table: "TabularQ", observe, states):
        """Preload rows from a solved table: observe(state) -> obs per core."""
        for core, state in states:
            self.table[self._key(observe(state))] = np.asarray(table.q[core], dtype=np.float64).copy()

    def snapshot(self):
        keys = sorted(self.table)
        meta = {
            "explore_calls": self.explore_calls,
            "n_entries": len(keys),
            "key_len": len(keys[0]) // 8 if keys else 0,
        }
        if keys:
            key_arr = np.stack([np.frombuffer(k, dtype=np.float64) for k in keys])
            val_arr = np.stack([self.table[k] for k in keys])
        else:
            key_arr = np.zeros((0, 0))
            val_arr = np.zeros((0, self.n_actions))
        return meta, {"keys": key_arr, "values": val_arr}

    def restore(self, meta, arrays):
        self.explore_calls = int(meta["explore_calls"])
        self.table = {}
        n = int(meta["n_entries"])
        if n == 0:
            return
        keys, values = arrays["keys"], arrays["values"]
        keys = keys.reshape(n, -1)
        values = values.reshape(n, self.n_actions)
        for i in range(n):
            self.table[keys[i].tobytes()] = values[i].copy()


# ---------------------------------------------------------------------------
# Module construction from declarative configs
# ---------------------------------------------------------------------------

MODULE_KINDS = ("dqn", "ddpg", "td3", "tabular")


@dataclass
class ModuleConfig:
    """Declarative per-stage learner description."""

    kind: str
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    actor_lr: float = 1e-4
    tau: float = 0.005
    grad_clip: float = 10.0
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 5000
    noise_std_frac: float = 0.1
    policy_delay: int = 2
    target_noise_std_frac: float = 0.2
    target_noise_clip_frac: float = 0.5

    def __post_init__(self):
        if self.kind not in MODULE_KINDS:
            raise InvalidConfigError(f"unknown module kind {self.kind!r}, expected one of {MODULE_KINDS}")
        self.hidden = tuple(int(h) for h in self.hidden)


def make_module(
    cfg: ModuleConfig, obs_dim: int, action_space, stage: int, seed: int
) -> QModule:
    """Build a learner for one stage, validating the action-space pairing."""
    discrete = isinstance(action_space, Discrete)
    if cfg.kind in ("dqn", "tabular") and not discrete:
        raise InvalidConfigError(f"module kind {cfg.kind!r} requires a discrete action space (stage {stage})")
    if cfg.kind in ("ddpg", "td3") and discrete:
        raise InvalidConfigError(f"module kind {cfg.kind!r} requires a box action space (stage {stage})")
    eps = EpsilonSchedule(cfg.epsilon_start, cfg.epsilon_end, cfg.epsilon_decay_steps)
    if cfg.kind == "dqn":
        return DqnModule(
            obs_dim, action_space.n, cfg.hidden, cfg.lr, cfg.tau, cfg.grad_clip,
            epsilon=eps, seed=seed, stage=stage,
        )
    if cfg.kind == "tabular":
        return TabularQModule(action_space.n, cfg.lr, epsilon=eps, stage=stage)
    if cfg.kind == "ddpg":
        return DdpgModule(
            obs_dim, action_space, cfg.hidden, cfg.actor_lr, cfg.lr, cfg.tau,
            cfg.noise_std_frac, cfg.grad_clip, seed=seed, stage=stage,
        )
    return Td3Module(
        obs_dim, action_space, cfg.hidden, cfg.actor_lr, cfg.lr, cfg.tau,
        cfg.noise_std_frac, cfg.grad_clip, cfg.policy_delay,
        cfg.target_noise_std_frac, cfg.target_noise_clip_frac, seed=seed, stage=stage,
    )


# ---------------------------------------------------------------------------
# Tabular value iteration: the exact oracle
# ---------------------------------------------------------------------------


@dataclass
class TabularQ:
    """Converged state-action values over core (stage-free) states."""

    q: dict
    gamma: float

    def value(self, core) -> float:
        return float(np.max(self.q[core]))

    def greedy_set(self, core, tol: float = 1e-9) -> set[int]:
        row = self.q[core]
        return set(np.flatnonzero(row >= row.max() - tol).tolist())


def _tabular_tables(env, cores: list):
    """Vectorized transition model over the given core states."""
    index = {c: i for i, c in enumerate(cores)}
    n = len(cores)
    n_actions = env.action_space(env.core_stage(cores[0])).n
    for c in cores:
        if env.action_space(env.core_stage(c)).n != n_actions:
            raise InvalidConfigError("tabular solvers require a uniform discrete action count")
    next_idx = np.zeros((n, n_actions), dtype=np.int64)
    rewards = np.zeros((n, n_actions))
    absorb = np.zeros((n, n_actions), dtype=bool)
    bonus = np.zeros((n, n_actions))
    return index, n_actions, next_idx, rewards, absorb, bonus


def _value_iterate(rewards, bonus, absorb, next_idx, gamma, tol, max_iters):
    n, n_actions = rewards.shape
    base = rewards + bonus
    q = np.zeros((n, n_actions))
    for _ in range(max_iters):
        v = q.max(axis=1)
        q_new = base + np.where(absorb, 0.0, gamma * v[next_idx])
        delta = float(np.max(np.abs(q_new - q)))
        q = q_new
        if delta < tol:
            return q
    raise NumericError(f"value iteration did not converge below {tol} in {max_iters} sweeps")


def tabular_flat_solve(env, gamma: float, tol: float = 1e-10, max_iters: int = 100_000) -> TabularQ:
    """Value iteration on the whole MDP, ignoring the stage structure."""
    cores = env.core_states()
    index, n_actions, next_idx, rewards, absorb, bonus = _tabular_tables(env, cores)
    for i, c in enumerate(cores):
        for a in range(n_actions):
            c2, r, term = env.core_step(c, a)
            rewards[i, a] = r
            if term:
                absorb[i, a] = True
            else:
                next_idx[i, a] = index[c2]
    q = _value_iterate(rewards, bonus, absorb, next_idx, gamma, tol, max_iters)
    return TabularQ({c: q[i].copy() for i, c in enumerate(cores)}, gamma)


def tabular_stage_solve(
    env,
    stage: int,
    v_next: dict,
    gamma: float,
    tol: float = 1e-10,
    max_iters: int = 100_000,
) -> TabularQ:
    """Value iteration on the episodic MDP of one stage.

    The state space is everything up to and including this stage's band.
    Successors that leave it into the next band are absorbing and pay the
    discounted next-stage value on top of the base reward; true terminals
    absorb with the base reward alone. v_next must cover every entry state
    of the next band (pass an empty mapping for the last stage).
    """
    if not 1 <= stage <= env.n_stages:
        raise InvalidConfigError(f"stage {stage} outside 1..{env.n_stages}")
    cores = [c for c in env.core_states() if env.core_stage(c) <= stage]
    index, n_actions, next_idx, rewards, absorb, bonus = _tabular_tables(env, cores)
    for i, c in enumerate(cores):
        for a in range(n_actions):
            c2, r, term = env.core_step(c, a)
            rewards[i, a] = r
            if term:
                if env.core_stage(c2) != env.n_stages:
                    raise StagedStructureError("terminal state outside the last band")
                absorb[i, a] = True
                continue
            s2 = env.core_stage(c2)
            if s2 <= stage:
                next_idx[i, a] = index[c2]
            elif s2 == stage + 1:
                absorb[i, a] = True
                if c2 not in v_next:
                    raise InvalidConfigError(f"v_next does not cover entry state {c2!r}")
                bonus[i, a] = gamma * v_next[c2]
            else:
                raise StagedStructureError(f"stage skip {stage} -> {s2} in the transition model")
    q = _value_iterate(rewards, bonus, absorb, next_idx, gamma, tol, max_iters)
    return TabularQ({c: q[i].copy() for i, c in enumerate(cores)}, gamma)


def solve_stacked(env, gammas, tol: float = 1e-10) -> list[TabularQ]:
    """Solve all stages backward; gammas may be one float or one per stage."""
    if np.isscalar(gammas):
        gammas = [float(gammas)] * env.n_stages
    if len(gammas) != env.n_stages:
        raise InvalidConfigError(f"need {env.n_stages} discounts, got {len(gammas)}")
    tables: list[TabularQ | None] = [None] * env.n_stages
    v_next: dict = {}
    for stage in range(env.n_stages, 0, -1):
        table = tabular_stage_solve(env, stage, v_next, gammas[stage - 1], tol)
        tables[stage - 1] = table
        v_next = {
            c: table.value(c) for c in table.q if env.core_stage(c) == stage
        }
    return tables  # type: ignore[return-value]
