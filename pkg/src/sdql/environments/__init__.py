from .gridworld import GridState, GridWorldEnv
from .cargo import CargoEnv, CargoState, load_occupancy
from .manipulator import ManipulatorEnv, ArmState, arm_forward_kinematics

__all__ = [
    "GridState",
    "GridWorldEnv",
    "CargoEnv",
    "CargoState",
    "load_occupancy",
    "ManipulatorEnv",
    "ArmState",
    "arm_forward_kinematics",
]
