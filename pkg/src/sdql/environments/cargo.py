"""Two-stage cooperative cargo transport with stochastic micro-robot dynamics.

Stage 1 is a slider robot: fixed propulsion speed, continuous control of its
turn rate. Stage 2 is a self-propelled robot: binary propulsion speed, no
heading control, so its orientation only diffuses. The handoff happens when
the cargo first crosses a vertical split line; the carried stage index then
latches to 2, which also selects the second robot's dynamics.

Both robots integrate one Euler step per control interval dt. Position uses
the pre-update heading; translational noise has per-axis std
sqrt(2 * D_t * dt) and rotational noise std sqrt(2 * D_r * dt). Noise draws
come from the caller's generator in the fixed order x, y, theta.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from ..errors import InvalidConfigError
from ..staged_mdp import Box, Discrete, StagedEnv

SLIDER, PROPELLED = 1, 2  # robot kind == carried stage index


class CargoState(NamedTuple):
    x: float
    y: float
    theta: float
    stage: int


def load_occupancy(path) -> np.ndarray:
    """Read a plain-text obstacle map: first line "rows cols", then rows of
    0/1 characters. Row i of the file is the strip y in [i, i+1)."""
    with open(path, "r", encoding="ascii") as fh:
        first = fh.readline().split()
        if len(first) != 2:
            raise InvalidConfigError("occupancy file must start with 'rows cols'")
        rows, cols = int(first[0]), int(first[1])
        grid = np.zeros((rows, cols), dtype=np.uint8)
        for i in range(rows):
            line = fh.readline().strip()
            if len(line) != cols or set(line) - {"0", "1"}:
                raise InvalidConfigError(f"occupancy row {i} malformed")
            grid[i] = [int(ch) for ch in line]
    return grid


def default_occupancy(width: int = 50, height: int = 50) -> np.ndarray:
    """Bundled layout: three rectangular obstacles off the central corridor."""
    grid = np.zeros((height, width), dtype=np.uint8)
    grid[5:15, 12:16] = 1
    grid[35:45, 20:24] = 1
    grid[10:18, 30:34] = 1
    return grid


class CargoEnv(StagedEnv):
    n_stages = 2

    def __init__(
        self,
        occupancy: np.ndarray | None = None,
        x_split: float = 25.0,
        target: tuple[float, float] = (34.0, 25.0),
        start_box: tuple[float, float, float, float] = (10.0, 16.0, 20.0, 30.0),
        v_const: float = 2.0,
        v_max: float = 2.0,
        omega_max: float = math.pi,
        d_trans: float = 0.02,
        d_rot: float = 0.2,
        dt: float = 0.05,
        capture_radius: float = 2.5,
        goal_reward: float = 1.0,
        patch_size: int = 10,
    ):
        self.occupancy = default_occupancy() if occupancy is None else np.asarray(occupancy, dtype=np.uint8)
        self.height, self.width = self.occupancy.shape
        if dt <= 0.0:
            raise InvalidConfigError("dt must be positive")
        if d_trans < 0.0 or d_rot < 0.0:
            raise InvalidConfigError("diffusivities must be non-negative")
        self.x_split = x_split
        self.target = (float(target[0]), float(target[1]))
        self.start_box = start_box
        self.v_const = v_const
        self.v_max = v_max
        self.omega_max = omega_max
        self.d_trans = d_trans
        self.d_rot = d_rot
        self.dt = dt
        self.capture_radius = capture_radius
        self.goal_reward = goal_reward
        self.patch_size = patch_size
        self.diag = math.hypot(self.width, self.height)
        half = patch_size // 2
        self._padded = np.pad(self.occupancy, half, mode="constant", constant_values=1)
        if self._occupied(*self.target):
            raise InvalidConfigError("target lies inside an obstacle")
        self._pos_std = math.sqrt(2.0 * d_trans * dt)
        self._ang_std = math.sqrt(2.0 * d_rot * dt)

    def _occupied(self, x: float, y: float) -> bool:
        if not (0.0 <= x < self.width and 0.0 <= y < self.height):
            return True
        return bool(self.occupancy[int(y), int(x)])

    # -- StagedEnv interface ------------------------------------------------

    def observe(self, state: CargoState) -> np.ndarray:
        half = self.patch_size // 2
        ix, iy = int(state.x), int(state.y)
        # padded array shifts indices by half, so the patch rows/cols below
        # cover cells iy-half .. iy+half-1 around the robot
        patch = self._padded[iy : iy + self.patch_size, ix : ix + self.patch_size]
        dx = self.target[0] - state.x
        dy = self.target[1] - state.y
        c, s = math.cos(state.theta), math.sin(state.theta)
        fwd = (dx * c + dy * s) / self.diag
        lat = (-dx * s + dy * c) / self.diag
        return np.concatenate([patch.astype(np.float64).ravel(), [fwd, lat]])

    def step(self, state: CargoState, action, rng: np.random.Generator):
        if state.stage == SLIDER:
            w = float(np.clip(np.asarray(action, dtype=np.float64).ravel()[0], -1.0, 1.0))
            speed = self.v_const
            dtheta_ctrl = w * self.omega_max * self.dt
        else:
            speed = self.v_max if int(action) == 1 else 0.0
            dtheta_ctrl = 0.0

        nx = state.x + speed * math.cos(state.theta) * self.dt
        ny = state.y + speed * math.sin(state.theta) * self.dt
        if self._pos_std > 0.0:
            nx += self._pos_std * rng.standard_normal()
            ny += self._pos_std * rng.standard_normal()
        ntheta = state.theta + dtheta_ctrl
        if self._ang_std > 0.0:
            ntheta += self._ang_std * rng.standard_normal()
        ntheta = _wrap_angle(ntheta)

        if self._occupied(nx, ny):
            nx, ny = state.x, state.y  # blocked moves revert position, keep the heading update

        stage = state.stage
        if stage == SLIDER and nx > self.x_split:
            stage = PROPELLED  # handoff to the second robot

        next_state = CargoState(nx, ny, ntheta, stage)
        terminal = math.hypot(nx - self.target[0], ny - self.target[1]) <= self.capture_radius
        reward = self.goal_reward if terminal else 0.0
        return next_state, reward, terminal

    def stage_of(self, state: CargoState) -> int:
        return state.stage

    def fresh_stage(self, x: float) -> int:
        """Stage a fresh (un-rolled-out) position starts in."""
        return SLIDER if x <= self.x_split else PROPELLED

    def sample_initial(self, rng: np.random.Generator) -> CargoState:
        x0, x1, y0, y1 = self.start_box
        while True:
            x = float(rng.uniform(x0, x1))
            y = float(rng.uniform(y0, y1))
            if not self._occupied(x, y):
                break
        theta = float(rng.uniform(-math.pi, math.pi))
        return CargoState(x, y, theta, self.fresh_stage(x))

    def sample_initial_in_band(self, k: int, rng: np.random.Generator) -> CargoState:
        """Band-restricted episode starts for the backward curriculum.

        Band 1 resets are draws from the natural initial distribution (the
        start box lies entirely on the slider side, so restriction is a
        no-op). The start box has no band-2 portion to restrict to, so band 2
        keeps the box's y cross-section and stretches x over the far side.
        """
        if k not in (SLIDER, PROPELLED):
            raise InvalidConfigError(f"cargo has stages 1 and 2, got {k}")
        if k == SLIDER:
            while True:
                state = self.sample_initial(rng)
                if state.stage == SLIDER:
                    return state
        _, _, y0, y1 = self.start_box
        while True:
            x = float(rng.uniform(self.x_split, self.width - 0.5))
            y = float(rng.uniform(y0, y1))
            if self._occupied(x, y):
                continue
            if math.hypot(x - self.target[0], y - self.target[1]) <= self.capture_radius:
                continue
            theta = float(rng.uniform(-math.pi, math.pi))
            return CargoState(x, y, theta, k)

    def action_space(self, stage: int):
        if stage == SLIDER:
            return Box(low=(-1.0,), high=(1.0,))
        return Discrete(2)  # 0 -> v = 0, 1 -> v = v_max

    # -- export helpers -----------------------------------------------------

    def state_components(self, state: CargoState) -> tuple:
        return (state.x, state.y, state.theta, state.stage)

    def state_component_names(self) -> tuple[str, ...]:
        return ("x", "y", "theta", "robot")


def _wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi
