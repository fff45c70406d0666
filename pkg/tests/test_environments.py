import math

import numpy as np
import pytest

from sdql.environments import (
    ArmState,
    CargoEnv,
    CargoState,
    GridWorldEnv,
    ManipulatorEnv,
    arm_forward_kinematics,
    load_occupancy,
)
from sdql.environments.cargo import default_occupancy
from sdql.errors import InvalidConfigError
from sdql.staged_mdp import Box, Discrete


class TestGridWorld:
    def test_band_geometry(self):
        env = GridWorldEnv()
        for col, stage in ((0, 1), (4, 1), (5, 2), (9, 2), (10, 3), (14, 3),
                           (15, 4), (19, 4), (20, 5), (24, 5)):
            assert env.core_stage((0, col)) == stage

    def test_boundary_moves_stay_in_place(self):
        env = GridWorldEnv()
        assert env.core_step((0, 0), 0)[0] == (0, 0)  # up at the top edge
        assert env.core_step((0, 0), 2)[0] == (0, 0)  # left at the left edge
        assert env.core_step((24, 0), 1)[0] == (24, 0)  # down at the bottom edge
        assert env.core_step((0, 24), 3)[0] == (0, 24)  # right at the right edge

    def test_goal_is_terminal_with_reward(self):
        env = GridWorldEnv()
        state = env.state_from_core((24, 23))
        nxt, reward, terminal = env.step(state, 3, np.random.default_rng(0))
        assert terminal and reward == 1.0 and (nxt.row, nxt.col) == (24, 24)

    def test_nonterminal_step_reward(self):
        env = GridWorldEnv()
        _, reward, terminal = env.step(env.state_from_core((0, 0)), 1, np.random.default_rng(0))
        assert not terminal and reward == 0.0

    def test_stage_latches_on_left_move(self):
        env = GridWorldEnv()
        state = env.state_from_core((3, 4))
        assert state.stage == 1
        state, _, _ = env.step(state, 3, np.random.default_rng(0))  # col 5: band 2
        assert state.stage == 2
        state, _, _ = env.step(state, 2, np.random.default_rng(0))  # back to col 4
        assert (state.row, state.col) == (3, 4)
        assert state.stage == 2  # the stage index never decreases

    def test_observation_normalized(self):
        env = GridWorldEnv()
        np.testing.assert_allclose(env.observe(env.state_from_core((12, 6))),
                                   [12 / 24, 6 / 24])
        np.testing.assert_array_equal(env.observe(env.state_from_core((24, 24), 5)), [1.0, 1.0])

    def test_band_sampling_covers_band_and_avoids_goal(self):
        env = GridWorldEnv()
        rng = np.random.default_rng(3)
        for k in range(1, 6):
            cols = set()
            for _ in range(200):
                s = env.sample_initial_in_band(k, rng)
                assert env.core_stage((s.row, s.col)) == k
                assert (s.row, s.col) != env.goal
                cols.add(s.col)
            assert len(cols) == 5  # every column of the 5-wide band shows up

    def test_initial_state_is_the_corner(self):
        env = GridWorldEnv()
        s = env.sample_initial(np.random.default_rng(0))
        assert (s.row, s.col, s.stage) == (0, 0, 1)

    def test_action_space(self):
        assert GridWorldEnv().action_space(1) == Discrete(4)

    def test_invalid_configs(self):
        with pytest.raises(InvalidConfigError):
            GridWorldEnv(band_boundaries=(5, 30))
        with pytest.raises(InvalidConfigError):
            GridWorldEnv(band_boundaries=(5, 5, 10))
        with pytest.raises(InvalidConfigError):
            GridWorldEnv(goal=(0, 0))  # not in the last band
        with pytest.raises(InvalidConfigError):
            GridWorldEnv(width=0)


class TestOccupancyFiles:
    def test_round_trip(self, tmp_path):
        grid = default_occupancy(12, 9)
        path = tmp_path / "map.txt"
        lines = [f"{grid.shape[0]} {grid.shape[1]}"]
        lines += ["".join(str(int(v)) for v in row) for row in grid]
        path.write_text("\n".join(lines) + "\n", encoding="ascii")
        loaded = load_occupancy(path)
        np.testing.assert_array_equal(loaded, grid)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("3\n000\n000\n000\n")
        with pytest.raises(InvalidConfigError):
            load_occupancy(p)

    def test_wrong_row_length(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("2 3\n000\n00\n")
        with pytest.raises(InvalidConfigError):
            load_occupancy(p)

    def test_bad_characters(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("1 3\n0x0\n")
        with pytest.raises(InvalidConfigError):
            load_occupancy(p)


def _quiet_cargo(**kw):
    kw.setdefault("d_trans", 0.0)
    kw.setdefault("d_rot", 0.0)
    return CargoEnv(**kw)


class TestCargo:
    def test_slider_euler_step_exact(self):
        env = _quiet_cargo()
        state = CargoState(10.0, 25.0, 0.3, 1)
        nxt, _, _ = env.step(state, np.array([0.5]), np.random.default_rng(0))
        # position integrates the pre-update heading
        assert nxt.x == pytest.approx(10.0 + 2.0 * math.cos(0.3) * 0.05, abs=0.0)
        assert nxt.y == pytest.approx(25.0 + 2.0 * math.sin(0.3) * 0.05, abs=0.0)
        assert nxt.theta == pytest.approx(0.3 + 0.5 * math.pi * 0.05)

    def test_slider_turn_rate_clipped(self):
        env = _quiet_cargo()
        state = CargoState(10.0, 25.0, 0.0, 1)
        hi, _, _ = env.step(state, np.array([4.0]), np.random.default_rng(0))
        assert hi.theta == pytest.approx(math.pi * 0.05)

    def test_propelled_binary_speed(self):
        env = _quiet_cargo()
        state = CargoState(30.0, 25.0, 0.7, 2)
        stop, _, _ = env.step(state, 0, np.random.default_rng(0))
        assert (stop.x, stop.y) == (30.0, 25.0)
        assert stop.theta == pytest.approx(0.7, abs=1e-12)  # angle wrap may cost one ulp
        go, _, _ = env.step(state, 1, np.random.default_rng(0))
        assert go.x == pytest.approx(30.0 + 2.0 * math.cos(0.7) * 0.05, abs=0.0)
        assert go.theta == pytest.approx(0.7, abs=1e-12)  # no heading control in stage 2

    def test_constant_turn_closed_form(self):
        env = _quiet_cargo()
        w, n = 0.25, 50
        delta = w * env.omega_max * env.dt
        state = CargoState(10.0, 25.0, 0.0, 1)
        for _ in range(n):
            state, _, _ = env.step(state, np.array([w]), np.random.default_rng(0))
        # geometric sum of the rotating heading: sum_k exp(i * k * delta)
        z = np.exp(1j * delta)
        s = (z**n - 1.0) / (z - 1.0)
        expect_x = 10.0 + env.v_const * env.dt * s.real
        expect_y = 25.0 + env.v_const * env.dt * s.imag
        assert state.x == pytest.approx(expect_x, abs=1e-9)
        assert state.y == pytest.approx(expect_y, abs=1e-9)
        assert state.theta == pytest.approx(n * delta, abs=1e-9)

    def test_noise_matches_diffusion_scaling(self):
        env = CargoEnv()
        rng = np.random.default_rng(11)
        state = CargoState(30.0, 40.0, 0.0, 2)
        dx, dth = [], []
        for _ in range(20000):
            nxt, _, _ = env.step(state, 0, rng)  # v = 0: pure noise
            dx.append(nxt.x - state.x)
            dth.append(nxt.theta - state.theta)
        assert np.std(dx) == pytest.approx(math.sqrt(2 * env.d_trans * env.dt), rel=0.05)
        assert np.std(dth) == pytest.approx(math.sqrt(2 * env.d_rot * env.dt), rel=0.05)
        assert abs(np.mean(dx)) < 0.002

    def test_blocked_move_reverts_position_keeps_heading(self):
        grid = np.zeros((50, 50), dtype=np.uint8)
        grid[25, 11] = 1  # wall directly ahead
        env = _quiet_cargo(occupancy=grid)
        state = CargoState(10.95, 25.5, 0.0, 1)
        nxt, _, _ = env.step(state, np.array([1.0]), np.random.default_rng(0))
        assert (nxt.x, nxt.y) == (10.95, 25.5)
        assert nxt.theta == pytest.approx(math.pi * 0.05)

    def test_leaving_the_arena_reverts(self):
        env = _quiet_cargo()
        state = CargoState(49.98, 25.0, 0.0, 2)
        nxt, _, _ = env.step(state, 1, np.random.default_rng(0))
        assert (nxt.x, nxt.y) == (49.98, 25.0)

    def test_handoff_latches_stage(self):
        env = _quiet_cargo()
        state = CargoState(24.99, 25.0, 0.0, 1)
        nxt, _, _ = env.step(state, np.array([0.0]), np.random.default_rng(0))
        assert nxt.x > env.x_split and nxt.stage == 2
        # moving back across the split keeps the second robot
        back = CargoState(25.05, 25.0, math.pi, 2)
        nxt2, _, _ = env.step(back, 1, np.random.default_rng(0))
        assert nxt2.x < env.x_split and nxt2.stage == 2

    def test_capture_is_terminal(self):
        env = _quiet_cargo()
        state = CargoState(31.45, 25.0, 0.0, 2)
        nxt, reward, terminal = env.step(state, 1, np.random.default_rng(0))
        assert terminal and reward == 1.0
        assert math.hypot(nxt.x - 34.0, nxt.y - 25.0) <= env.capture_radius

    def test_observation_layout(self):
        grid = np.zeros((50, 50), dtype=np.uint8)
        grid[5, 18] = 1
        env = _quiet_cargo(occupancy=grid)
        obs = env.observe(CargoState(20.3, 7.9, 0.0, 1))
        assert obs.shape == (102,)
        patch = obs[:100].reshape(10, 10)
        # patch covers rows 2..11, cols 15..24 around (ix, iy) = (20, 7)
        assert patch[3, 3] == 1.0
        assert patch.sum() == 1.0

    def test_observation_pads_outside_as_occupied(self):
        env = _quiet_cargo(occupancy=np.zeros((50, 50), dtype=np.uint8))
        obs = env.observe(CargoState(0.5, 0.5, 0.0, 1))
        patch = obs[:100].reshape(10, 10)
        assert np.all(patch[:5, :] == 1.0)  # rows above the arena
        assert np.all(patch[:, :5] == 1.0)  # columns left of the arena

    def test_target_offset_in_robot_frame(self):
        env = _quiet_cargo()
        ahead = env.observe(CargoState(30.0, 25.0, 0.0, 2))
        assert ahead[100] == pytest.approx(4.0 / env.diag)
        assert ahead[101] == pytest.approx(0.0, abs=1e-12)
        side = env.observe(CargoState(30.0, 25.0, math.pi / 2, 2))
        assert side[100] == pytest.approx(0.0, abs=1e-12)
        assert side[101] == pytest.approx(-4.0 / env.diag)

    def test_action_spaces_per_stage(self):
        env = CargoEnv()
        assert env.action_space(1) == Box(low=(-1.0,), high=(1.0,))
        assert env.action_space(2) == Discrete(2)

    def test_band_sampling(self):
        env = CargoEnv()
        rng = np.random.default_rng(5)
        for _ in range(100):
            s1 = env.sample_initial_in_band(1, rng)
            assert s1.stage == 1 and 10.0 <= s1.x <= 16.0  # band 1 draws from the start box
            s2 = env.sample_initial_in_band(2, rng)
            assert s2.stage == 2 and s2.x > env.x_split
            assert 20.0 <= s2.y <= 30.0  # band 2 keeps the box's y cross-section
            assert math.hypot(s2.x - env.target[0], s2.y - env.target[1]) > env.capture_radius

    def test_initial_draw_in_start_box(self):
        env = CargoEnv()
        rng = np.random.default_rng(9)
        for _ in range(50):
            s = env.sample_initial(rng)
            assert 10.0 <= s.x <= 16.0 and 20.0 <= s.y <= 30.0 and s.stage == 1

    def test_target_inside_obstacle_rejected(self):
        grid = np.zeros((50, 50), dtype=np.uint8)
        grid[25, 34] = 1
        with pytest.raises(InvalidConfigError):
            CargoEnv(occupancy=grid)


class TestManipulator:
    def test_forward_kinematics_examples(self):
        assert arm_forward_kinematics(0.0, 0.0) == pytest.approx((1.0, 0.0, 2.0, 0.0))
        x1, y1, x2, y2 = arm_forward_kinematics(math.pi / 2, -math.pi / 2)
        assert (x1, y1) == pytest.approx((0.0, 1.0))
        assert (x2, y2) == pytest.approx((1.0, 1.0))
        x1, y1, x2, y2 = arm_forward_kinematics(math.pi / 2, math.pi / 2)
        assert (x2, y2) == pytest.approx((-1.0, 1.0))

    def test_target_reachable_exactly(self):
        env = ManipulatorEnv()
        assert env.distance(ArmState(math.pi / 2, -math.pi / 2, 2)) < 1e-12
        assert env.distance(ArmState(0.0, math.pi / 2, 2)) < 1e-12

    def test_fresh_stage_by_distance(self):
        env = ManipulatorEnv()
        assert env.fresh_stage(0.0, 0.0) == 1  # tip at (2, 0), far from (1, 1)
        assert env.fresh_stage(math.pi / 2, -math.pi / 2 + 0.05) == 2

    def test_stage_latches(self):
        env = ManipulatorEnv()
        state = ArmState(math.pi / 2, -math.pi / 2 + 0.1, 2)
        # drive away until the distance exceeds the boundary; stage must stay 2
        rng = np.random.default_rng(0)
        for _ in range(30):
            state, _, _ = env.step(state, np.array([0.05, 0.05]), rng)
        assert env.distance(state) > env.stage_boundary
        assert state.stage == 2

    def test_action_clipping_per_stage(self):
        env = ManipulatorEnv()
        coarse = ArmState(0.0, 0.0, 1)
        nxt, _, _ = env.step(coarse, np.array([10.0, -10.0]), np.random.default_rng(0))
        assert nxt.theta1 == pytest.approx(0.25) and nxt.theta2 == pytest.approx(-0.25)
        fine = ArmState(0.0, 2.0, 2)
        nxt, _, _ = env.step(fine, np.array([10.0, -10.0]), np.random.default_rng(0))
        assert nxt.theta1 == pytest.approx(0.05) and nxt.theta2 == pytest.approx(2.0 - 0.05)

    def test_angles_wrap(self):
        env = ManipulatorEnv()
        state = ArmState(math.pi - 0.1, 0.0, 1)
        nxt, _, _ = env.step(state, np.array([0.25, 0.0]), np.random.default_rng(0))
        assert nxt.theta1 == pytest.approx(-math.pi + 0.15)

    def test_observation_scaling_and_clipping(self):
        env = ManipulatorEnv()
        coarse = ArmState(0.0, 0.0, 1)
        obs1 = env.observe(coarse)
        x1, y1, x2, y2 = arm_forward_kinematics(0.0, 0.0)
        np.testing.assert_allclose(obs1[:4], [x1, y1, x2, y2])
        np.testing.assert_allclose(obs1[4:], [1.0 - x2, 1.0 - y2])
        # same joint angles relabeled stage 2: offsets divided by 0.05 then clipped
        fine = ArmState(0.0, 0.0, 2)
        obs2 = env.observe(fine)
        assert obs2[4] == pytest.approx(max(-5.0, (1.0 - 2.0) / 0.05))
        assert obs2[4] == -5.0 and obs2[5] == 5.0

    def test_small_offsets_not_clipped_in_stage2(self):
        env = ManipulatorEnv()
        state = ArmState(math.pi / 2, -math.pi / 2 + 0.05, 2)
        obs = env.observe(state)
        assert -5.0 < obs[4] < 5.0 and -5.0 < obs[5] < 5.0

    def test_success_is_terminal(self):
        env = ManipulatorEnv()
        near = ArmState(math.pi / 2, -math.pi / 2 + 0.012, 2)
        assert 0.01 < env.distance(near) < 0.03
        nxt, reward, terminal = env.step(near, np.array([0.0, -0.012]), np.random.default_rng(0))
        assert terminal and reward == 1.0 and env.distance(nxt) <= 0.01

    def test_band_sampling_excludes_terminal_states(self):
        env = ManipulatorEnv()
        rng = np.random.default_rng(2)
        for _ in range(50):
            s2 = env.sample_initial_in_band(2, rng)
            assert s2.stage == 2
            assert env.success_radius < env.distance(s2) < env.stage_boundary
            s1 = env.sample_initial_in_band(1, rng)
            assert s1.stage == 1 and env.distance(s1) >= env.stage_boundary

    def test_action_space_scales_with_stage(self):
        env = ManipulatorEnv()
        assert env.action_space(1) == Box(low=(-0.25, -0.25), high=(0.25, 0.25))
        assert env.action_space(2) == Box(low=(-0.05, -0.05), high=(0.05, 0.05))

    def test_invalid_configs(self):
        with pytest.raises(InvalidConfigError):
            ManipulatorEnv(target=(3.0, 0.0))
        with pytest.raises(InvalidConfigError):
            ManipulatorEnv(success_radius=0.3)
