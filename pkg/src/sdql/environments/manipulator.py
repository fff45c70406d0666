"""Two-stage precision reaching with a planar two-link arm.

Stage 1 is coarse motion: joint increments up to 0.25 rad while the
end-effector is far from the target. When the effector-target distance
first drops below 0.2 the task enters stage 2, where actions shrink to
0.05 rad and the observed target offset is rescaled by the same factor so
the fine-scale module sees O(1) inputs. The stage index latches at 2 for
the rest of the episode. Reward is 1 exactly when the distance reaches
0.01, which also ends the episode.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from ..errors import InvalidConfigError
from ..staged_mdp import Box, StagedEnv


class ArmState(NamedTuple):
    theta1: float
    theta2: float
    stage: int


def arm_forward_kinematics(
    theta1: float, theta2: float, l1: float = 1.0, l2: float = 1.0
) -> tuple[float, float, float, float]:
    """Elbow and end-effector positions of the two-link arm."""
    x1 = l1 * math.cos(theta1)
    y1 = l1 * math.sin(theta1)
    x2 = x1 + l2 * math.cos(theta1 + theta2)
    y2 = y1 + l2 * math.sin(theta1 + theta2)
    return x1, y1, x2, y2


class ManipulatorEnv(StagedEnv):
    n_stages = 2

    def __init__(
        self,
        target: tuple[float, float] = (1.0, 1.0),
        l1: float = 1.0,
        l2: float = 1.0,
        success_radius: float = 0.01,
        stage_boundary: float = 0.2,
        u_max_stage1: float = 0.25,
        u_max_stage2: float = 0.05,
        obs_scale_stage2: float = 0.05,
        obs_clip: float = 5.0,
        goal_reward: float = 1.0,
    ):
        if math.hypot(*target) > l1 + l2:
            raise InvalidConfigError(f"target {target} is out of reach for arm lengths {l1}, {l2}")
        if not 0.0 < success_radius < stage_boundary:
            raise InvalidConfigError("need 0 < success_radius < stage_boundary")
        self.target = (float(target[0]), float(target[1]))
        self.l1 = l1
        self.l2 = l2
        self.success_radius = success_radius
        self.stage_boundary = stage_boundary
        self.u_max = (u_max_stage1, u_max_stage2)
        self.obs_scale = (1.0, obs_scale_stage2)
        self.obs_clip = obs_clip
        self.goal_reward = goal_reward

    def distance(self, state: ArmState) -> float:
        _, _, x2, y2 = arm_forward_kinematics(state.theta1, state.theta2, self.l1, self.l2)
        return math.hypot(self.target[0] - x2, self.target[1] - y2)

    def fresh_stage(self, theta1: float, theta2: float) -> int:
        _, _, x2, y2 = arm_forward_kinematics(theta1, theta2, self.l1, self.l2)
        d = math.hypot(self.target[0] - x2, self.target[1] - y2)
        return 2 if d < self.stage_boundary else 1

    # -- StagedEnv interface ------------------------------------------------

    def observe(self, state: ArmState) -> np.ndarray:
        x1, y1, x2, y2 = arm_forward_kinematics(state.theta1, state.theta2, self.l1, self.l2)
        scale = self.obs_scale[state.stage - 1]
        ox = (self.target[0] - x2) / scale
        oy = (self.target[1] - y2) / scale
        ox = min(max(ox, -self.obs_clip), self.obs_clip)
        oy = min(max(oy, -self.obs_clip), self.obs_clip)
        return np.array([x1, y1, x2, y2, ox, oy], dtype=np.float64)

    def step(self, state: ArmState, action, rng: np.random.Generator | None = None):
        u = np.asarray(action, dtype=np.float64).ravel()
        u_max = self.u_max[state.stage - 1]
        u1 = float(np.clip(u[0], -u_max, u_max))
        u2 = float(np.clip(u[1], -u_max, u_max))
        t1 = _wrap_angle(state.theta1 + u1)
        t2 = _wrap_angle(state.theta2 + u2)
        stage = state.stage
        if stage == 1 and self.fresh_stage(t1, t2) == 2:
            stage = 2  # latched for the remainder of the episode
        next_state = ArmState(t1, t2, stage)
        d = self.distance(next_state)
        terminal = d <= self.success_radius
        reward = self.goal_reward if terminal else 0.0
        return next_state, reward, terminal

    def stage_of(self, state: ArmState) -> int:
        return state.stage

    def sample_initial(self, rng: np.random.Generator) -> ArmState:
        t1 = float(rng.uniform(-math.pi, math.pi))
        t2 = float(rng.uniform(-math.pi, math.pi))
        return ArmState(t1, t2, self.fresh_stage(t1, t2))

    def sample_initial_in_band(self, k: int, rng: np.random.Generator) -> ArmState:
        if k not in (1, 2):
            raise InvalidConfigError(f"manipulator has stages 1 and 2, got {k}")
        while True:
            state = self.sample_initial(rng)
            if state.stage == k and self.distance(state) > self.success_radius:
                return state

    def action_space(self, stage: int) -> Box:
        u = self.u_max[stage - 1]
        return Box(low=(-u, -u), high=(u, u))

    # -- export helpers -----------------------------------------------------

    def state_components(self, state: ArmState) -> tuple:
        return (state.theta1, state.theta2, self.distance(state))

    def state_component_names(self) -> tuple[str, ...]:
        return ("theta1", "theta2", "dist")


def _wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi
