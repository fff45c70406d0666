"""Replay buffers, the phase schedule, and the full stacked training loop."""

import numpy as np
import pytest

from sdql.environments import GridWorldEnv
from sdql.errors import InvalidBatchError, InvalidConfigError, StagedStructureError
from sdql.rl_modules import ModuleConfig, TabularQModule, tabular_flat_solve
from sdql.staged_mdp import Discrete, StageSpec, Transition
from sdql.stacked_trainer import (
    EVAL_SEED_OFFSET,
    MODULE_SEED_STRIDE,
    ReplayBuffer,
    StackedPolicy,
    StackedTrainer,
    TrainerConfig,
    merged_value,
)


def transition(reward=0.0, stage=1, obs=(0.0, 0.0), action=0, terminal=False,
               transitioned=False):
    o = np.asarray(obs, dtype=np.float64)
    return Transition(o, action, reward, o + 1.0, terminal, transitioned, stage)


def tabular_config(n_stages, episodes, seed=0, batch_size=8, warmup=1,
                   max_steps=60, eps_start=1.0, eps_end=0.05, decay=1500):
    mc = ModuleConfig(kind="tabular", lr=0.2, epsilon_start=eps_start,
                      epsilon_end=eps_end, epsilon_decay_steps=decay)
    return TrainerConfig(
        stage_spec=StageSpec(n_stages, (0.99,) * n_stages, max_steps),
        module_configs=[mc] * n_stages,
        episodes_per_phase=episodes,
        batch_size=batch_size,
        buffer_capacity=5000,
        warmup_steps=warmup,
        seed=seed,
    )


class TestReplayBuffer:
    def test_wraparound_keeps_last_capacity(self):
        buf = ReplayBuffer(capacity=4, stage=1)
        for i in range(6):
            buf.push(transition(reward=float(i)))
        assert buf.size == 4
        assert buf.pos == 2
        assert set(buf._rewards.tolist()) == {2.0, 3.0, 4.0, 5.0}

    def test_sample_shapes_and_stage(self):
        buf = ReplayBuffer(capacity=8, stage=3)
        for i in range(5):
            buf.push(transition(stage=3, obs=(float(i), 0.0)))
        batch = buf.sample(16, np.random.default_rng(0))
        assert len(batch) == 16  # resampling with replacement past the fill
        assert batch.obs.shape == (16, 2)
        assert batch.stage == 3

    def test_empty_sample_rejected(self):
        with pytest.raises(InvalidBatchError):
            ReplayBuffer(capacity=4, stage=1).sample(2, np.random.default_rng(0))

    def test_wrong_stage_rejected(self):
        buf = ReplayBuffer(capacity=4, stage=2)
        with pytest.raises(InvalidBatchError):
            buf.push(transition(stage=1))

    def test_bad_capacity_rejected(self):
        with pytest.raises(InvalidConfigError):
            ReplayBuffer(capacity=0, stage=1)

    def test_snapshot_restore_after_wraparound(self):
        buf = ReplayBuffer(capacity=4, stage=1)
        for i in range(6):
            buf.push(transition(reward=float(i), terminal=(i == 5)))
        meta, arrays = buf.snapshot()
        buf2 = ReplayBuffer(capacity=4, stage=1)
        buf2.restore(meta, arrays)
        assert buf2.size == 4 and buf2.pos == 2
        assert np.array_equal(buf2._rewards, buf._rewards)
        assert np.array_equal(buf2._terminal, buf._terminal)
        assert buf2._actions.dtype == buf._actions.dtype


class TestTrainerConfig:
    def test_module_count_must_match_stages(self):
        with pytest.raises(InvalidConfigError):
            TrainerConfig(
                stage_spec=StageSpec(2, (0.9, 0.9), 10),
                module_configs=[ModuleConfig(kind="tabular")],
                episodes_per_phase=1,
            )

    def test_bad_scalars_rejected(self):
        spec = StageSpec(1, (0.9,), 10)
        mc = [ModuleConfig(kind="tabular")]
        with pytest.raises(InvalidConfigError):
            TrainerConfig(spec, mc, episodes_per_phase=-1)
        with pytest.raises(InvalidConfigError):
            TrainerConfig(spec, mc, episodes_per_phase=1, batch_size=0)
        with pytest.raises(InvalidConfigError):
            TrainerConfig(spec, mc, episodes_per_phase=1, warmup_steps=0)

    def test_stage_count_must_match_env(self):
        env = GridWorldEnv(width=4, height=1, band_boundaries=())
        with pytest.raises(InvalidConfigError):
            StackedTrainer(env, tabular_config(n_stages=2, episodes=1))


class _JumpEnv:
    """Stage index jumps 1 -> 3 in a single step; the trainer must reject it."""

    n_stages = 3

    def observe(self, state):
        return np.array([float(state)])

    def step(self, state, action, rng):
        return 2, 0.0, False

    def stage_of(self, state):
        return 1 if state == 0 else 3

    def sample_initial(self, rng):
        return 0

    def sample_initial_in_band(self, k, rng):
        return 0

    def action_space(self, stage):
        return Discrete(2)


class TestCollectStep:
    def make(self, **kw):
        env = GridWorldEnv(width=6, height=6, band_boundaries=(3,))
        cfg = tabular_config(2, episodes=1, eps_start=0.0, eps_end=0.0, **kw)
        return env, StackedTrainer(env, cfg)

    def preload_right(self, trainer, env, module_idx, cells):
        m = trainer.modules[module_idx]
        for rc in cells:
            obs = env.observe(env.state_from_core(rc))
            m.table[m._key(obs)] = np.array([0.0, 0.0, 0.0, 1.0])  # argmax "right"

    def test_transition_bonus_is_discounted_next_value(self):
        env, tr = self.make()
        self.preload_right(tr, env, 0, [(0, 2)])
        m2 = tr.modules[1]
        entry_obs = env.observe(env.state_from_core((0, 3)))
        m2.table[m2._key(entry_obs)] = np.array([0.7, 0.1, 0.0, 0.0])
        t, nxt = tr.collect_step(env.state_from_core((0, 2)))
        assert t.stage == 1
        assert t.stage_transitioned and not t.terminal
        assert t.reward == 0.0 + 0.99 * 0.7
        assert env.stage_of(nxt) == 2
        assert tr.buffers[0].size == 1 and tr.buffers[1].size == 0

    def test_terminal_overrides_transition(self):
        env, tr = self.make()
        # goal (5, 5) is two bands away; use a goal right on the boundary
        env2 = GridWorldEnv(width=6, height=6, band_boundaries=(3,), goal=(5, 3))
        tr2 = StackedTrainer(env2, tabular_config(2, episodes=1, eps_start=0.0,
                                                  eps_end=0.0))
        self.preload_right(tr2, env2, 0, [(5, 2)])
        t, _ = tr2.collect_step(env2.state_from_core((5, 2)))
        assert t.terminal
        assert not t.stage_transitioned
        assert t.reward == 1.0  # goal reward alone, no boundary bonus

    def test_same_band_step_keeps_base_reward(self):
        env, tr = self.make()
        self.preload_right(tr, env, 0, [(0, 0)])
        t, _ = tr.collect_step(env.state_from_core((0, 0)))
        assert t.reward == 0.0
        assert not t.stage_transitioned and not t.terminal

    def test_stage_jump_rejected(self):
        env = _JumpEnv()
        tr = StackedTrainer(env, tabular_config(3, episodes=1, max_steps=5))
        with pytest.raises(StagedStructureError):
            tr.collect_step(0)

    def test_module_seeds_derive_from_config_seed(self):
        env = GridWorldEnv(width=6, height=6, band_boundaries=(3,))
        mc = ModuleConfig(kind="dqn", hidden=(8,))
        cfg = TrainerConfig(StageSpec(2, (0.99, 0.99), 10), [mc, mc],
                            episodes_per_phase=1, seed=7)
        tr = StackedTrainer(env, cfg)
        from sdql.nncore import mlp_init
        expect = mlp_init([2, 8, 4], "relu", "linear",
                          seed=7 * MODULE_SEED_STRIDE + 1)
        assert np.array_equal(tr.modules[0].online.weights[0], expect.weights[0])


class TestPhaseSchedule:
    def test_phases_run_backward(self):
        env = GridWorldEnv(width=6, height=6, band_boundaries=(3,))
        tr = StackedTrainer(env, tabular_config(2, episodes=1))
        assert tr.phase == 2 and not tr.finished
        tr.run_episode()
        # a band-2 start can never produce stage-1 transitions
        assert tr.buffers[0].size == 0
        assert tr.buffers[1].size > 0

    def test_zero_episodes_is_a_no_op(self):
        env = GridWorldEnv(width=6, height=6, band_boundaries=(3,))
        tr = StackedTrainer(env, tabular_config(2, episodes=0))
        tr.train()
        assert tr.finished
        assert tr.total_env_steps == 0

    def test_warmup_gates_learning(self):
        env = GridWorldEnv(width=6, height=6, band_boundaries=(3,))
        tr = StackedTrainer(env, tabular_config(2, episodes=1, warmup=10_000))
        tr.run_episode()
        assert tr.learn_calls == 0

    def test_on_step_hook_sees_transitions(self):
        env = GridWorldEnv(width=6, height=6, band_boundaries=(3,))
        tr = StackedTrainer(env, tabular_config(2, episodes=1))
        seen = []
        tr.run_episode(on_step=lambda trn, t, stats: seen.append(t))
        assert len(seen) > 0
        assert all(t.stage == 2 for t in seen)


class TestTrainedStack:
    def test_tabular_stack_recovers_flat_optimum(self):
        env = GridWorldEnv(width=6, height=6, band_boundaries=(3,))
        tr = StackedTrainer(env, tabular_config(2, episodes=200, seed=1))
        tr.train()
        assert tr.finished
        flat = tabular_flat_solve(env, gamma=0.99)
        stats = tr.evaluate(20)
        assert stats.success_rate == 1.0
        for core in env.core_states():
            if core == env.goal:
                continue
            state = env.state_from_core(core)
            a = tr.policy().act(state, np.random.default_rng(0))
            assert a in flat.greedy_set(core), f"suboptimal action at {core}"
        start_v = merged_value(env, tr.modules, env.state_from_core((0, 0)))
        assert abs(start_v - flat.value((0, 0))) < 1e-3

    def test_single_stage_env_trains(self):
        env = GridWorldEnv(width=4, height=1, band_boundaries=())
        tr = StackedTrainer(env, tabular_config(1, episodes=60, max_steps=30))
        tr.train()
        stats = tr.evaluate(10)
        assert stats.success_rate == 1.0
        assert stats.transition_rate == 0.0


class TestEvaluate:
    def preloaded_chain(self, boundaries=()):
        env = GridWorldEnv(width=4, height=1, band_boundaries=boundaries)
        n = env.n_stages
        tr = StackedTrainer(env, tabular_config(n, episodes=1, eps_start=0.0,
                                                eps_end=0.0))
        for c in env.core_states():
            if c == env.goal:
                continue
            stage = env.core_stage(c)
            m = tr.modules[stage - 1]
            obs = env.observe(env.state_from_core(c))
            m.table[m._key(obs)] = np.array([0.0, 0.0, 0.0, 1.0])
        return env, tr

    def test_greedy_rollout_stats(self):
        env, tr = self.preloaded_chain(boundaries=(2,))
        rows = []
        stats = tr.evaluate(2, on_step=lambda *args: rows.append(args))
        assert stats.success_rate == 1.0
        assert stats.transition_rate == 1.0
        assert stats.mean_steps == 3.0
        assert stats.stage_steps == [2.0, 1.0]
        assert stats.mean_return == 1.0
        # pre-step stages along one rollout: band 1 twice, band 2 once
        assert [r[2] for r in rows[:3]] == [1, 1, 2]
        assert [r[5] for r in rows[:3]] == [0.0, 0.0, 1.0]

    def test_needs_at_least_one_episode(self):
        env, tr = self.preloaded_chain()
        with pytest.raises(InvalidConfigError):
            tr.evaluate(0)

    def test_evaluation_never_touches_training_stream(self):
        env, tr = self.preloaded_chain(boundaries=(2,))
        before = tr.rng.bit_generator.state
        tr.evaluate(5)
        assert tr.rng.bit_generator.state == before

    def test_explicit_rng_preserves_eval_stream(self):
        env, tr = self.preloaded_chain()
        before = tr.eval_rng.bit_generator.state
        tr.evaluate(3, rng=np.random.default_rng(123))
        assert tr.eval_rng.bit_generator.state == before

    def test_eval_seed_is_offset_from_config_seed(self):
        env, tr = self.preloaded_chain()
        fresh = np.random.default_rng(0 + EVAL_SEED_OFFSET)
        assert tr.eval_rng.bit_generator.state == fresh.bit_generator.state

    def test_stats_as_dict(self):
        env, tr = self.preloaded_chain()
        d = tr.evaluate(1).as_dict()
        assert d["episodes"] == 1
        assert set(d) == {"episodes", "success_rate", "mean_return", "mean_steps",
                          "stage_steps", "transition_rate"}


class TestPolicyAndMergedValue:
    def test_policy_routes_by_stage(self):
        env = GridWorldEnv(width=4, height=1, band_boundaries=(2,))
        tr = StackedTrainer(env, tabular_config(2, episodes=1, eps_start=0.0,
                                                eps_end=0.0))
        m1, m2 = tr.modules
        obs1 = env.observe(env.state_from_core((0, 0)))
        obs2 = env.observe(env.state_from_core((0, 2)))
        m1.table[m1._key(obs1)] = np.array([0.0, 1.0, 0.0, 0.0])
        m2.table[m2._key(obs2)] = np.array([0.0, 0.0, 1.0, 0.0])
        pol = StackedPolicy(env, tr.modules)
        rng = np.random.default_rng(0)
        assert pol.act(env.state_from_core((0, 0)), rng) == 1
        assert pol.act(env.state_from_core((0, 2)), rng) == 2

    def test_merged_value_reads_own_stage(self):
        env = GridWorldEnv(width=4, height=1, band_boundaries=(2,))
        tr = StackedTrainer(env, tabular_config(2, episodes=1))
        m2 = tr.modules[1]
        obs2 = env.observe(env.state_from_core((0, 2)))
        m2.table[m2._key(obs2)] = np.array([0.3, 0.9, 0.0, 0.0])
        assert merged_value(env, tr.modules, env.state_from_core((0, 2))) == 0.9
        assert merged_value(env, tr.modules, env.state_from_core((0, 0))) == 0.0


class TestSnapshotRestore:
    def test_mid_training_restore_resumes_identically(self):
        env = GridWorldEnv(width=6, height=6, band_boundaries=(3,))
        cfg = tabular_config(2, episodes=30, seed=3)
        a = StackedTrainer(env, cfg)
        for _ in range(12):
            a.run_episode()
        meta, arrays = a.snapshot()
        b = StackedTrainer(env, tabular_config(2, episodes=30, seed=3))
        b.restore(meta, arrays)
        a.train()
        b.train()
        ma, aa = a.snapshot()
        mb, ab = b.snapshot()
        assert ma["total_env_steps"] == mb["total_env_steps"]
        assert ma["rng"] == mb["rng"]
        assert set(aa) == set(ab)
        for k in aa:
            assert np.array_equal(aa[k], ab[k]), f"array {k} diverged"
        assert a.evaluate(10).as_dict() == b.evaluate(10).as_dict()
