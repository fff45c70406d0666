"""Five-stage grid navigation benchmark.

A single agent walks a width x height grid from the upper-left corner to a
goal in the lower-right corner. Columns are split into vertical bands by a
list of thresholds; band i is stage i, so the nested subsets are
S_i = {col < threshold_i}. Rewards are sparse: goal_reward on arrival,
step_reward everywhere else.
"""

from __future__ import annotations

import bisect
from typing import NamedTuple

import numpy as np

from ..errors import InvalidConfigError
from ..staged_mdp import Discrete, FiniteStagedEnv


class GridState(NamedTuple):
    row: int
    col: int
    stage: int


# action index -> (row delta, col delta)
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right
ACTION_NAMES = ("up", "down", "left", "right")


class GridWorldEnv(FiniteStagedEnv):
    def __init__(
        self,
        width: int = 25,
        height: int = 25,
        band_boundaries: tuple[int, ...] = (5, 10, 15, 20),
        start: tuple[int, int] = (0, 0),
        goal: tuple[int, int] | None = None,
        goal_reward: float = 1.0,
        step_reward: float = 0.0,
    ):
        if width < 1 or height < 1:
            raise InvalidConfigError("grid dimensions must be positive")
        self.width = width
        self.height = height
        self.band_boundaries = tuple(sorted(band_boundaries))
        if any(not 0 < b < width for b in self.band_boundaries):
            raise InvalidConfigError(f"band boundaries must lie inside (0, {width})")
        if len(set(self.band_boundaries)) != len(self.band_boundaries):
            raise InvalidConfigError("band boundaries must be distinct")
        self.n_stages = len(self.band_boundaries) + 1
        self.start = start
        self.goal = goal if goal is not None else (height - 1, width - 1)
        if not self._in_grid(*self.start) or not self._in_grid(*self.goal):
            raise InvalidConfigError("start and goal must lie inside the grid")
        if self.core_stage(self.goal) != self.n_stages:
            raise InvalidConfigError("goal must lie in the last band")
        self.goal_reward = goal_reward
        self.step_reward = step_reward

    def _in_grid(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    # -- core (stage-free) view used by the tabular solvers ----------------

    def core_states(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.height) for c in range(self.width)]

    def core_stage(self, core: tuple[int, int]) -> int:
        return bisect.bisect_right(self.band_boundaries, core[1]) + 1

    def core_step(self, core: tuple[int, int], action: int):
        dr, dc = MOVES[action]
        nr, nc = core[0] + dr, core[1] + dc
        if not self._in_grid(nr, nc):
            nr, nc = core  # boundary moves leave the agent in place
        terminal = (nr, nc) == self.goal
        reward = self.goal_reward if terminal else self.step_reward
        return (nr, nc), reward, terminal

    def state_from_core(self, core: tuple[int, int], stage: int | None = None) -> GridState:
        if stage is None:
            stage = self.core_stage(core)
        return GridState(core[0], core[1], stage)

    # -- StagedEnv interface ------------------------------------------------

    def observe(self, state: GridState) -> np.ndarray:
        return np.array(
            [state.row / max(1, self.height - 1), state.col / max(1, self.width - 1)],
            dtype=np.float64,
        )

    def step(self, state: GridState, action: int, rng: np.random.Generator | None = None):
        core, reward, terminal = self.core_step((state.row, state.col), int(action))
        stage = state.stage
        if self.core_stage(core) > stage:
            stage += 1
        return GridState(core[0], core[1], stage), reward, terminal

    def stage_of(self, state: GridState) -> int:
        return state.stage

    def sample_initial(self, rng: np.random.Generator) -> GridState:
        return self.state_from_core(self.start)

    def sample_initial_in_band(self, k: int, rng: np.random.Generator) -> GridState:
        lo = 0 if k == 1 else self.band_boundaries[k - 2]
        hi = self.width if k == self.n_stages else self.band_boundaries[k - 1]
        while True:
            row = int(rng.integers(self.height))
            col = int(rng.integers(lo, hi))
            if (row, col) != self.goal:
                return GridState(row, col, k)

    def action_space(self, stage: int) -> Discrete:
        return Discrete(4)

    # -- export helpers -----------------------------------------------------

    def state_components(self, state: GridState) -> tuple:
        return (state.row, state.col)

    def state_component_names(self) -> tuple[str, ...]:
        return ("row", "col")
