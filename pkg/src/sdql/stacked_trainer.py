"""Backward stage-by-stage training of a stack of Q-learning modules.

One learner and one replay buffer per stage. Training runs in phases
k = N, N-1, ..., 1: during phase k episodes start inside band k, so the
last stage is competent before any earlier stage trains against it. Every
environment step stores one transition into the acting stage's buffer and
then gives each stage with enough data one gradient step, last stage first.

When a step crosses into the next band, the stored reward is
r + gamma_i * V_{i+1}(s') where V_{i+1} comes from the next module's target
parameters, and the transition is flagged so learners never bootstrap past
the boundary themselves. An episode-ending step is recorded as terminal
only, even if it also crossed a boundary.

Reproducibility contract: a trainer built from (env, config) consumes its
single random stream in a fixed order per step: action selection first,
then the environment's noise, then one buffer sample per learning stage in
descending stage order. Module i is initialized from seed
config.seed * 1000 + i. Evaluation uses a separate stream (seed + 900007)
so turning it on or off never perturbs training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidBatchError, InvalidConfigError, NumericError, StagedStructureError
from .rl_modules import ModuleConfig, QModule, TransitionBatch, make_module
from .staged_mdp import StagedEnv, StageSpec, Transition, reset_in_band, staged_reward

log = logging.getLogger("sdql.trainer")

EVAL_SEED_OFFSET = 900007
MODULE_SEED_STRIDE = 1000


class ReplayBuffer:
    """Ring buffer of same-stage transitions with uniform resampling.

    Storage is allocated lazily from the first pushed transition's shapes.
    sample() draws indices with rng.integers(0, size, size=batch_size), so
    it works (with replacement) even when batch_size exceeds the fill.
    """

    def __init__(self, capacity: int, stage: int):
        if capacity < 1:
            raise InvalidConfigError("buffer capacity must be positive")
        self.capacity = capacity
        self.stage = stage
        self.size = 0
        self.pos = 0
        self._obs = None
        self._actions = None
        self._rewards = None
        self._next_obs = None
        self._terminal = None
        self._transitioned = None

    def _allocate(self, t: Transition):
        obs = np.asarray(t.state_obs, dtype=np.float64)
        self._obs = np.zeros((self.capacity, obs.shape[0]))
        self._next_obs = np.zeros((self.capacity, obs.shape[0]))
        if np.ndim(t.action) == 0:
            self._actions = np.zeros(self.capacity, dtype=np.int64)
        else:
            self._actions = np.zeros((self.capacity, np.asarray(t.action).shape[0]))
        self._rewards = np.zeros(self.capacity)
        self._terminal = np.zeros(self.capacity, dtype=bool)
        self._transitioned = np.zeros(self.capacity, dtype=bool)

    def push(self, t: Transition):
        if t.stage != self.stage:
            raise InvalidBatchError(f"stage-{t.stage} transition pushed to stage-{self.stage} buffer")
        if self._obs is None:
            self._allocate(t)
        i = self.pos
        self._obs[i] = t.state_obs
        self._actions[i] = t.action
        self._rewards[i] = t.reward
        self._next_obs[i] = t.next_state_obs
        self._terminal[i] = t.terminal
        self._transitioned[i] = t.stage_transitioned
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        if self.size == 0:
            raise InvalidBatchError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return TransitionBatch(
            obs=self._obs[idx],
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_obs=self._next_obs[idx],
            terminal=self._terminal[idx],
            transitioned=self._transitioned[idx],
            stage=self.stage,
        )

    def snapshot(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"size": self.size, "pos": self.pos, "allocated": self._obs is not None}
        if self._obs is None:
            return meta, {}
        meta["discrete"] = self._actions.dtype.kind == "i"
        n = self.size
        arrays = {
            "obs": self._obs[:n],
            "actions": np.asarray(self._actions[:n], dtype=np.float64),
            "rewards": self._rewards[:n],
            "next_obs": self._next_obs[:n],
            "terminal": self._terminal[:n].astype(np.float64),
            "transitioned": self._transitioned[:n].astype(np.float64),
        }
        return meta, arrays

    def restore(self, meta: dict, arrays: dict[str, np.ndarray]):
        self.size = int(meta["size"])
        self.pos = int(meta["pos"])
        if not meta["allocated"]:
            return
        n = self.size
        obs = arrays["obs"].reshape(n, -1)
        self._obs = np.zeros((self.capacity, obs.shape[1]))
        self._next_obs = np.zeros((self.capacity, obs.shape[1]))
        self._obs[:n] = obs
        self._next_obs[:n] = arrays["next_obs"].reshape(n, -1)
        acts = arrays["actions"]
        if meta["discrete"]:
            self._actions = np.zeros(self.capacity, dtype=np.int64)
            self._actions[:n] = acts.reshape(n).astype(np.int64)
        else:
            acts = acts.reshape(n, -1)
            self._actions = np.zeros((self.capacity, acts.shape[1]))
            self._actions[:n] = acts
        self._rewards = np.zeros(self.capacity)
        self._rewards[:n] = arrays["rewards"].reshape(n)
        self._terminal = np.zeros(self.capacity, dtype=bool)
        self._terminal[:n] = arrays["terminal"].reshape(n) != 0.0
        self._transitioned = np.zeros(self.capacity, dtype=bool)
        self._transitioned[:n] = arrays["transitioned"].reshape(n) != 0.0


@dataclass
class TrainerConfig:
    stage_spec: StageSpec
    module_configs: list[ModuleConfig]
    episodes_per_phase: int
    batch_size: int = 64
    buffer_capacity: int = 100_000
    warmup_steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if len(self.module_configs) != self.stage_spec.n_stages:
            raise InvalidConfigError(
                f"{self.stage_spec.n_stages} stages need {self.stage_spec.n_stages} "
                f"module configs, got {len(self.module_configs)}"
            )
        if self.episodes_per_phase < 0:
            raise InvalidConfigError("episodes_per_phase must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be positive")
        if self.warmup_steps < 1:
            raise InvalidConfigError("warmup_steps must be positive")


@dataclass
class EvalStats:
    episodes: int
    success_rate: float
    mean_return: float
    mean_steps: float
    stage_steps: list[float]
    transition_rate: float

    def as_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "mean_return": self.mean_return,
            "mean_steps": self.mean_steps,
            "stage_steps": list(self.stage_steps),
            "transition_rate": self.transition_rate,
        }


class StackedPolicy:
    """Routes each state to its stage's module."""

    def __init__(self, env: StagedEnv, modules: list[QModule]):
        self.env = env
        self.modules = modules

    def act(self, state, rng: np.random.Generator, explore: bool = False):
        stage = self.env.stage_of(state)
        return self.modules[stage - 1].act(self.env.observe(state), explore, rng)


def merged_value(env: StagedEnv, modules: list[QModule], state) -> float:
    """Single value function stitched from the stack: V(s) of s's own stage."""
    stage = env.stage_of(state)
    return modules[stage - 1].value(env.observe(state))


def probe_obs_dim(env: StagedEnv) -> int:
    obs = env.observe(env.sample_initial(np.random.default_rng(0)))
    return int(np.asarray(obs).shape[0])


class StackedTrainer:
    """Owns the module stack, the buffers, and the backward phase schedule."""

    def __init__(self, env: StagedEnv, config: TrainerConfig):
        if config.stage_spec.n_stages != env.n_stages:
            raise InvalidConfigError(
                f"config declares {config.stage_spec.n_stages} stages, environment has {env.n_stages}"
            )
        self.env = env
        self.cfg = config
        self.rng = np.random.default_rng(config.seed)
        self.eval_rng = np.random.default_rng(config.seed + EVAL_SEED_OFFSET)
        obs_dim = probe_obs_dim(env)
        self.modules: list[QModule] = [
            make_module(
                config.module_configs[i - 1],
                obs_dim,
                env.action_space(i),
                stage=i,
                seed=config.seed * MODULE_SEED_STRIDE + i,
            )
            for i in range(1, env.n_stages + 1)
        ]
        self.buffers = [ReplayBuffer(config.buffer_capacity, stage=i) for i in range(1, env.n_stages + 1)]
        self.phase = env.n_stages
        self.episodes_in_phase = 0
        self.total_env_steps = 0
        self.learn_calls = 0

    @property
    def finished(self) -> bool:
        return self.phase < 1

    def policy(self) -> StackedPolicy:
        return StackedPolicy(self.env, self.modules)

    def gamma(self, stage: int) -> float:
        return self.cfg.stage_spec.discount_per_stage[stage - 1]

    def collect_step(self, state):
        """Act in state, store the (possibly boundary-adjusted) transition.

        Returns (transition, next_state). Raises if the environment skips a
        stage or regresses, which the carried-stage convention forbids.
        """
        stage = self.env.stage_of(state)
        obs = self.env.observe(state)
        action = self.modules[stage - 1].act(obs, explore=True, rng=self.rng)
        next_state, base_reward, terminal = self.env.step(state, action, self.rng)
        next_stage = self.env.stage_of(next_state)
        if next_stage not in (stage, stage + 1):
            raise StagedStructureError(f"stage moved {stage} -> {next_stage} in one step")
        next_obs = self.env.observe(next_state)
        transitioned = next_stage == stage + 1 and not terminal
        if transitioned:
            v_next = self.modules[next_stage - 1].value(next_obs)
            reward = staged_reward(base_reward, True, self.gamma(stage), v_next)
        else:
            reward = base_reward
        t = Transition(
            state_obs=np.asarray(obs, dtype=np.float64),
            action=action,
            reward=float(reward),
            next_state_obs=np.asarray(next_obs, dtype=np.float64),
            terminal=terminal,
            stage_transitioned=transitioned,
            stage=stage,
        )
        self.buffers[stage - 1].push(t)
        self.total_env_steps += 1
        return t, next_state

    def learn_all(self) -> dict[int, object]:
        """One gradient step for every stage past warmup, last stage first."""
        stats = {}
        for i in range(self.env.n_stages, 0, -1):
            buf = self.buffers[i - 1]
            if buf.size < self.cfg.warmup_steps:
                continue
            batch = buf.sample(self.cfg.batch_size, self.rng)
            st = self.modules[i - 1].learn(batch, self.gamma(i), self.rng)
            if not np.isfinite(st.critic_loss):
                raise NumericError(f"stage {i} loss diverged: {st.critic_loss}")
            stats[i] = st
            self.learn_calls += 1
        return stats

    def run_episode(self, on_step=None) -> tuple[float, int, bool]:
        """One training episode started inside the current phase's band."""
        k = self.phase
        state = reset_in_band(self.env, k, self.rng)
        ep_return = 0.0
        steps = 0
        success = False
        for _ in range(self.cfg.stage_spec.max_steps_per_episode):
            t, state = self.collect_step(state)
            if t.stage < k:
                raise StagedStructureError(f"phase {k} produced a stage-{t.stage} transition")
            stats = self.learn_all()
            if on_step is not None:
                on_step(self, t, stats)
            ep_return += t.reward
            steps += 1
            if t.terminal:
                success = True
                break
        self.episodes_in_phase += 1
        return ep_return, steps, success

    def train(self, on_step=None, on_episode=None):
        """Run all remaining phases backward until the stack is trained."""
        while self.phase >= 1:
            k = self.phase
            while self.episodes_in_phase < self.cfg.episodes_per_phase:
                ep_return, steps, success = self.run_episode(on_step)
                log.info(
                    "phase %d episode %d/%d: steps=%d return=%.4f success=%s",
                    k, self.episodes_in_phase, self.cfg.episodes_per_phase, steps, ep_return, success,
                )
                if on_episode is not None:
                    on_episode(self)
            log.info("phase %d complete (%d env steps so far)", k, self.total_env_steps)
            self.episodes_in_phase = 0
            self.phase -= 1

    def evaluate(
        self,
        episodes: int,
        rng: np.random.Generator | None = None,
        start_band: int = 1,
        max_steps: int | None = None,
        on_step=None,
    ) -> EvalStats:
        """Greedy rollouts from fresh starts; never touches the training stream.

        on_step, if given, is called once per step with
        (episode, step, stage, state, action, reward, cumulative_return),
        where state is the pre-step state.
        """
        if episodes < 1:
            raise InvalidConfigError("evaluation needs at least one episode")
        rng = self.eval_rng if rng is None else rng
        cap = max_steps or self.cfg.stage_spec.max_steps_per_episode
        n = self.env.n_stages
        successes = 0
        total_return = 0.0
        total_steps = 0
        stage_steps = np.zeros(n)
        transitions = 0
        for ep in range(episodes):
            if start_band == 1:
                state = self.env.sample_initial(rng)
            else:
                state = reset_in_band(self.env, start_band, rng)
            saw_transition = False
            ep_return = 0.0
            for step in range(cap):
                stage = self.env.stage_of(state)
                action = self.modules[stage - 1].act(self.env.observe(state), False, rng)
                next_state, r, terminal = self.env.step(state, action, rng)
                stage_steps[stage - 1] += 1
                total_return += r
                ep_return += r
                total_steps += 1
                if on_step is not None:
                    on_step(ep, step, stage, state, action, r, ep_return)
                state = next_state
                if self.env.stage_of(state) != stage:
                    saw_transition = True
                if terminal:
                    successes += 1
                    break
            if saw_transition:
                transitions += 1
        return EvalStats(
            episodes=episodes,
            success_rate=successes / episodes,
            mean_return=total_return / episodes,
            mean_steps=total_steps / episodes,
            stage_steps=(stage_steps / episodes).tolist(),
            transition_rate=transitions / episodes,
        )

    # -- checkpoint support -------------------------------------------------

    @staticmethod
    def _rng_meta(rng: np.random.Generator) -> dict:
        st = rng.bit_generator.state
        return {
            "bit_generator": st["bit_generator"],
            "state": str(st["state"]["state"]),
            "inc": str(st["state"]["inc"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @staticmethod
    def _restore_rng(rng: np.random.Generator, meta: dict):
        rng.bit_generator.state = {
            "bit_generator": meta["bit_generator"],
            "state": {"state": int(meta["state"]), "inc": int(meta["inc"])},
            "has_uint32": int(meta["has_uint32"]),
            "uinteger": int(meta["uinteger"]),
        }

    def snapshot(self) -> tuple[dict, dict[str, np.ndarray]]:
        """Full mutable state: counters, both rng streams, modules, buffers."""
        meta = {
            "phase": self.phase,
            "episodes_in_phase": self.episodes_in_phase,
            "total_env_steps": self.total_env_steps,
            "learn_calls": self.learn_calls,
            "rng": self._rng_meta(self.rng),
            "eval_rng": self._rng_meta(self.eval_rng),
            "modules": [],
            "buffers": [],
        }
        arrays: dict[str, np.ndarray] = {}
        for i, m in enumerate(self.modules, start=1):
            m_meta, m_arrays = m.snapshot()
            meta["modules"].append(m_meta)
            for k, v in m_arrays.items():
                arrays[f"m{i}.{k}"] = v
        for i, b in enumerate(self.buffers, start=1):
            b_meta, b_arrays = b.snapshot()
            meta["buffers"].append(b_meta)
            for k, v in b_arrays.items():
                arrays[f"b{i}.{k}"] = v
        return meta, arrays

    def restore(self, meta: dict, arrays: dict[str, np.ndarray]):
        self.phase = int(meta["phase"])
        self.episodes_in_phase = int(meta["episodes_in_phase"])
        self.total_env_steps = int(meta["total_env_steps"])
        self.learn_calls = int(meta["learn_calls"])
        self._restore_rng(self.rng, meta["rng"])
        self._restore_rng(self.eval_rng, meta["eval_rng"])
        for i, m in enumerate(self.modules, start=1):
            prefix = f"m{i}."
            sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            m.restore(meta["modules"][i - 1], sub)
        for i, b in enumerate(self.buffers, start=1):
            prefix = f"b{i}."
            sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            b.restore(meta["buffers"][i - 1], sub)
