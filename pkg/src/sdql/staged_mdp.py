"""Stage-structured MDP abstractions.

A task with N linear stages partitions its state space into nested subsets
S_1 c S_2 c ... c S_N. A fresh state's stage index is the least i with
s in S_i; along a rollout the index is event-driven: it stays i while the
state remains in S_i and becomes i+1 exactly when the state leaves S_i.
Because the subsets are nested, the index never decreases, even if the
underlying coordinates move "backward". Environments therefore carry the
current stage inside their state objects and update it in step().
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, NumericError, StagedStructureError


@dataclass(frozen=True)
class StageSpec:
    """Stage count, per-stage discount factors, and the episode step cap."""

    n_stages: int
    discount_per_stage: tuple[float, ...]
    max_steps_per_episode: int

    def __post_init__(self):
        if self.n_stages < 1:
            raise InvalidConfigError(f"n_stages must be >= 1, got {self.n_stages}")
        object.__setattr__(self, "discount_per_stage", tuple(self.discount_per_stage))
        if len(self.discount_per_stage) != self.n_stages:
            raise InvalidConfigError(
                f"need {self.n_stages} discount factors, got {len(self.discount_per_stage)}"
            )
        if any(not (0.0 < g < 1.0) for g in self.discount_per_stage):
            raise InvalidConfigError(f"discount factors must lie in (0, 1): {self.discount_per_stage}")
        if self.max_steps_per_episode < 1:
            raise InvalidConfigError("max_steps_per_episode must be positive")


@dataclass(frozen=True)
class Discrete:
    """Finite action set {0, ..., n-1}."""

    n: int

    def __post_init__(self):
        if self.n < 2:
            raise InvalidConfigError(f"discrete action space needs n >= 2, got {self.n}")


@dataclass(frozen=True)
class Box:
    """Axis-aligned continuous action box."""

    low: tuple[float, ...]
    high: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "low", tuple(float(v) for v in self.low))
        object.__setattr__(self, "high", tuple(float(v) for v in self.high))
        if len(self.low) != len(self.high) or not self.low:
            raise InvalidConfigError("box bounds must be non-empty and congruent")
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise InvalidConfigError(f"box requires low < high componentwise: {self.low} vs {self.high}")

    @property
    def dim(self) -> int:
        return len(self.low)


ActionSpace = Discrete | Box


@dataclass
class Transition:
    """One experience tuple; reward already carries the transition bonus."""

    state_obs: np.ndarray
    action: int | np.ndarray
    reward: float
    next_state_obs: np.ndarray
    terminal: bool
    stage_transitioned: bool
    stage: int

    def __post_init__(self):
        if self.terminal and self.stage_transitioned:
            raise StagedStructureError("terminal and stage_transitioned are mutually exclusive")
        if self.stage < 1:
            raise StagedStructureError(f"stage index must be >= 1, got {self.stage}")


class StagedEnv(abc.ABC):
    """Environment with a linear stage decomposition.

    Implementations keep the current stage index inside their state objects
    (see module docstring) and expose it through stage_of(). Distinct
    instances may be stepped concurrently; a single instance is single-owner
    during a rollout.
    """

    n_stages: int

    @abc.abstractmethod
    def observe(self, state) -> np.ndarray:
        """Observation vector the stage module of this state consumes."""

    @abc.abstractmethod
    def step(self, state, action, rng: np.random.Generator):
        """Advance one step; returns (next_state, base_reward, terminal)."""

    @abc.abstractmethod
    def stage_of(self, state) -> int:
        """Current stage index of the state, in 1..n_stages."""

    @abc.abstractmethod
    def sample_initial(self, rng: np.random.Generator):
        """Draw a start state from the task's natural initial distribution."""

    @abc.abstractmethod
    def sample_initial_in_band(self, k: int, rng: np.random.Generator):
        """Draw a start state whose stage index is exactly k."""

    @abc.abstractmethod
    def action_space(self, stage: int) -> ActionSpace:
        """Action space of the given stage."""


class FiniteStagedEnv(StagedEnv):
    """Staged environment with finite, enumerable, deterministic dynamics.

    The tabular solvers work on stage-free "core" states so that the same
    enumeration serves both the staged and the flat treatment of the MDP.
    """

    @abc.abstractmethod
    def core_states(self) -> list:
        """All non-absorbed core states, hashable."""

    @abc.abstractmethod
    def core_stage(self, core) -> int:
        """Least i with the core state in S_i (fresh-state stage rule)."""

    @abc.abstractmethod
    def core_step(self, core, action: int):
        """Deterministic dynamics: (next_core, base_reward, terminal)."""

    @abc.abstractmethod
    def state_from_core(self, core, stage: int | None = None):
        """Wrap a core state as a full state carrying the given stage."""


def stage_index(env: StagedEnv, state) -> int:
    """Stage index of a state, in 1..N."""
    i = env.stage_of(state)
    if not 1 <= i <= env.n_stages:
        raise StagedStructureError(f"stage index {i} outside 1..{env.n_stages}")
    return i


def detect_transition(env: StagedEnv, s, s_next) -> bool:
    """True iff s -> s_next crosses into the next stage.

    Anything other than staying put or advancing by one stage indicates a
    misconfigured environment and raises.
    """
    i = stage_index(env, s)
    j = stage_index(env, s_next)
    if j == i:
        return False
    if j == i + 1:
        return True
    raise StagedStructureError(f"stage index jumped {i} -> {j}; stages must advance one at a time")


def staged_reward(base_reward: float, transitioned: bool, gamma_next: float, v_next: float) -> float:
    """Reward seen by the stage being trained.

    On a stage transition the next stage's value estimate at the entry state
    is folded in, discounted by the training stage's own factor; otherwise
    the base reward passes through untouched (bitwise).
    """
    if not transitioned:
        return base_reward
    if not (0.0 < gamma_next < 1.0):
        raise InvalidConfigError(f"gamma must lie in (0, 1), got {gamma_next}")
    if not np.isfinite(v_next):
        raise NumericError(f"non-finite next-stage value {v_next}")
    return base_reward + gamma_next * v_next


def reset_in_band(env: StagedEnv, k: int, rng: np.random.Generator):
    """Sample a start state with stage index exactly k and verify it."""
    if not 1 <= k <= env.n_stages:
        raise InvalidConfigError(f"band index {k} outside 1..{env.n_stages}")
    state = env.sample_initial_in_band(k, rng)
    got = env.stage_of(state)
    if got != k:
        raise StagedStructureError(f"environment sampled stage {got} for requested band {k}")
    return state


def rejection_sample_in_band(
    env: StagedEnv, k: int, rng: np.random.Generator, max_tries: int = 10_000
):
    """Default band sampler: reject draws from sample_initial until stage == k."""
    for _ in range(max_tries):
        state = env.sample_initial(rng)
        if env.stage_of(state) == k:
            return state
    raise InvalidConfigError(f"could not sample band {k} in {max_tries} draws")
