"""Stacked deep Q-learning: one Q module per task stage, trained backward.

Long-horizon tasks whose state space decomposes into nested stage subsets
get one Q-learning module per stage. Training runs the stages in reverse so
each module bootstraps, through a reward bonus at the stage boundary, from
an already-trained successor. The merged greedy policy routes every state
to its own stage's module.
"""

from .errors import (
    CheckpointError,
    InvalidBatchError,
    InvalidConfigError,
    NumericError,
    SdqlError,
    ShapeError,
    StagedStructureError,
)
from .staged_mdp import (
    ActionSpace,
    Box,
    Discrete,
    FiniteStagedEnv,
    StagedEnv,
    StageSpec,
    Transition,
    detect_transition,
    reset_in_band,
    stage_index,
    staged_reward,
)
from .rl_modules import (
    DdpgModule,
    DqnModule,
    EpsilonSchedule,
    LearnStats,
    ModuleConfig,
    QModule,
    TabularQ,
    TabularQModule,
    Td3Module,
    TransitionBatch,
    make_module,
    solve_stacked,
    tabular_flat_solve,
    tabular_stage_solve,
    truncation_monitor,
)
from .stacked_trainer import (
    EvalStats,
    ReplayBuffer,
    StackedPolicy,
    StackedTrainer,
    TrainerConfig,
    merged_value,
)
from .environments import (
    ArmState,
    CargoEnv,
    CargoState,
    GridState,
    GridWorldEnv,
    ManipulatorEnv,
    arm_forward_kinematics,
    load_occupancy,
)

__version__ = "0.1.0"
