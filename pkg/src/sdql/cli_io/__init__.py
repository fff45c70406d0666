from .checkpoint import load_trainer, read_checkpoint, save_checkpoint
from .config import RunConfig, build_run_config, load_config, override_seed

__all__ = [
    "RunConfig",
    "build_run_config",
    "load_config",
    "override_seed",
    "load_trainer",
    "read_checkpoint",
    "save_checkpoint",
]
