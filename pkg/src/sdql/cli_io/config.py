"""Strict YAML run configuration.

Every mapping is validated against an explicit key set; unknown keys are
hard errors naming the offending field and its location, so typos never
silently fall back to defaults. The parsed document is kept verbatim on
the RunConfig (with file paths resolved) because checkpoints embed it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import yaml

from ..environments import CargoEnv, GridWorldEnv, ManipulatorEnv, load_occupancy
from ..errors import InvalidConfigError
from ..rl_modules import MODULE_KINDS, ModuleConfig
from ..staged_mdp import StagedEnv, StageSpec
from ..stacked_trainer import TrainerConfig

ENV_KINDS = ("gridworld", "cargo", "manipulator")

_TOP_KEYS = ("env", "stages", "modules", "training", "evaluation")
_STAGE_KEYS = ("discounts", "max_steps_per_episode")
_TRAINING_KEYS = ("episodes_per_phase", "batch_size", "buffer_capacity", "warmup_steps", "seed")
_EVAL_KEYS = ("episodes",)
_MODULE_KEYS = (
    "kind", "hidden", "lr", "actor_lr", "tau", "grad_clip",
    "epsilon_start", "epsilon_end", "epsilon_decay_steps",
    "noise_std_frac", "policy_delay", "target_noise_std_frac", "target_noise_clip_frac",
)
_ENV_KEYS = {
    "gridworld": ("kind", "width", "height", "band_boundaries", "start", "goal",
                  "goal_reward", "step_reward"),
    "cargo": ("kind", "occupancy_file", "x_split", "target", "start_box", "v_const",
              "v_max", "omega_max", "d_trans", "d_rot", "dt", "capture_radius",
              "goal_reward"),
    "manipulator": ("kind", "target", "l1", "l2", "success_radius", "stage_boundary",
                    "u_max_stage1", "u_max_stage2", "obs_scale_stage2", "obs_clip",
                    "goal_reward"),
}


@dataclass
class RunConfig:
    env_kind: str
    env: StagedEnv
    trainer: TrainerConfig
    eval_episodes: int
    raw: dict


def _check_mapping(value, allowed: tuple[str, ...], path: str) -> dict:
    if not isinstance(value, dict):
        raise InvalidConfigError(f"{path} must be a mapping, got {type(value).__name__}")
    unknown = sorted(set(value) - set(allowed))
    if unknown:
        raise InvalidConfigError(
            f"unknown key(s) {unknown} in {path}; allowed keys: {sorted(allowed)}"
        )
    return value


def _require(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise InvalidConfigError(f"{path} is missing required key {key!r}")
    return mapping[key]


def _as_float(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidConfigError(f"{path} must be a number, got {value!r}")
    return float(value)


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidConfigError(f"{path} must be an integer, got {value!r}")
    return value


def _as_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise InvalidConfigError(f"{path} must be a string, got {value!r}")
    return value


def _as_float_list(value, path: str, length: int | None = None) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)):
        raise InvalidConfigError(f"{path} must be a list, got {value!r}")
    out = tuple(_as_float(v, f"{path}[{i}]") for i, v in enumerate(value))
    if length is not None and len(out) != length:
        raise InvalidConfigError(f"{path} must have {length} entries, got {len(out)}")
    return out


def _as_int_list(value, path: str, length: int | None = None) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)):
        raise InvalidConfigError(f"{path} must be a list, got {value!r}")
    out = tuple(_as_int(v, f"{path}[{i}]") for i, v in enumerate(value))
    if length is not None and len(out) != length:
        raise InvalidConfigError(f"{path} must have {length} entries, got {len(out)}")
    return out


def _pop_typed(section: dict, key: str, path: str, cast, default=None):
    if key not in section:
        return default
    return cast(section[key], f"{path}.{key}")


def _build_env(section: dict, base_dir: Path) -> tuple[str, StagedEnv]:
    if not isinstance(section, dict):
        raise InvalidConfigError("env must be a mapping")
    kind = _as_str(_require(section, "kind", "env"), "env.kind")
    if kind not in ENV_KINDS:
        raise InvalidConfigError(f"env.kind must be one of {list(ENV_KINDS)}, got {kind!r}")
    _check_mapping(section, _ENV_KEYS[kind], "env")
    if kind == "gridworld":
        kwargs = {}
        for key in ("width", "height"):
            v = _pop_typed(section, key, "env", _as_int)
            if v is not None:
                kwargs[key] = v
        if "band_boundaries" in section:
            kwargs["band_boundaries"] = _as_int_list(section["band_boundaries"], "env.band_boundaries")
        for key in ("start", "goal"):
            if key in section:
                kwargs[key] = tuple(_as_int_list(section[key], f"env.{key}", length=2))
        for key in ("goal_reward", "step_reward"):
            v = _pop_typed(section, key, "env", _as_float)
            if v is not None:
                kwargs[key] = v
        return kind, GridWorldEnv(**kwargs)
    if kind == "cargo":
        kwargs = {}
        if "occupancy_file" in section:
            occ_path = Path(_as_str(section["occupancy_file"], "env.occupancy_file"))
            if not occ_path.is_absolute():
                occ_path = base_dir / occ_path
            section["occupancy_file"] = str(occ_path)
            kwargs["occupancy"] = load_occupancy(occ_path)
        if "target" in section:
            kwargs["target"] = tuple(_as_float_list(section["target"], "env.target", length=2))
        if "start_box" in section:
            kwargs["start_box"] = tuple(_as_float_list(section["start_box"], "env.start_box", length=4))
        for key in ("x_split", "v_const", "v_max", "omega_max", "d_trans", "d_rot",
                    "dt", "capture_radius", "goal_reward"):
            v = _pop_typed(section, key, "env", _as_float)
            if v is not None:
                kwargs[key] = v
        return kind, CargoEnv(**kwargs)
    kwargs = {}
    if "target" in section:
        kwargs["target"] = tuple(_as_float_list(section["target"], "env.target", length=2))
    for key in ("l1", "l2", "success_radius", "stage_boundary", "u_max_stage1",
                "u_max_stage2", "obs_scale_stage2", "obs_clip", "goal_reward"):
        v = _pop_typed(section, key, "env", _as_float)
        if v is not None:
            kwargs[key] = v
    return kind, ManipulatorEnv(**kwargs)


def _build_stage_spec(section: dict, n_stages: int) -> StageSpec:
    _check_mapping(section, _STAGE_KEYS, "stages")
    discounts = _require(section, "discounts", "stages")
    if isinstance(discounts, (int, float)) and not isinstance(discounts, bool):
        gammas = (float(discounts),) * n_stages
    else:
        gammas = _as_float_list(discounts, "stages.discounts", length=n_stages)
    max_steps = _as_int(_require(section, "max_steps_per_episode", "stages"),
                        "stages.max_steps_per_episode")
    return StageSpec(n_stages, gammas, max_steps)


def _build_module(section: dict, index: int) -> ModuleConfig:
    path = f"modules[{index}]"
    _check_mapping(section, _MODULE_KEYS, path)
    kind = _as_str(_require(section, "kind", path), f"{path}.kind")
    if kind not in MODULE_KINDS:
        raise InvalidConfigError(f"{path}.kind must be one of {list(MODULE_KINDS)}, got {kind!r}")
    kwargs = {"kind": kind}
    if "hidden" in section:
        kwargs["hidden"] = _as_int_list(section["hidden"], f"{path}.hidden")
    for key in ("lr", "actor_lr", "tau", "grad_clip", "epsilon_start", "epsilon_end",
                "noise_std_frac", "target_noise_std_frac", "target_noise_clip_frac"):
        v = _pop_typed(section, key, path, _as_float)
        if v is not None:
            kwargs[key] = v
    for key in ("epsilon_decay_steps", "policy_delay"):
        v = _pop_typed(section, key, path, _as_int)
        if v is not None:
            kwargs[key] = v
    return ModuleConfig(**kwargs)


def build_run_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a parsed configuration mapping and construct its objects."""
    base_dir = base_dir or Path.cwd()
    _check_mapping(data, _TOP_KEYS, "top level")
    env_kind, env = _build_env(_require(data, "env", "top level"), base_dir)
    stage_spec = _build_stage_spec(_require(data, "stages", "top level"), env.n_stages)

    modules_section = _require(data, "modules", "top level")
    if not isinstance(modules_section, list):
        raise InvalidConfigError("modules must be a list with one entry per stage")
    if len(modules_section) != env.n_stages:
        raise InvalidConfigError(
            f"modules must have one entry per stage ({env.n_stages}), got {len(modules_section)}"
        )
    module_cfgs = [_build_module(m, i) for i, m in enumerate(modules_section)]

    training = _check_mapping(_require(data, "training", "top level"), _TRAINING_KEYS, "training")
    trainer = TrainerConfig(
        stage_spec=stage_spec,
        module_configs=module_cfgs,
        episodes_per_phase=_as_int(_require(training, "episodes_per_phase", "training"),
                                   "training.episodes_per_phase"),
        batch_size=_pop_typed(training, "batch_size", "training", _as_int, 64),
        buffer_capacity=_pop_typed(training, "buffer_capacity", "training", _as_int, 100_000),
        warmup_steps=_pop_typed(training, "warmup_steps", "training", _as_int, 1000),
        seed=_pop_typed(training, "seed", "training", _as_int, 0),
    )

    eval_episodes = 100
    if "evaluation" in data:
        eval_section = _check_mapping(data["evaluation"], _EVAL_KEYS, "evaluation")
        eval_episodes = _pop_typed(eval_section, "episodes", "evaluation", _as_int, 100)
    if eval_episodes < 1:
        raise InvalidConfigError("evaluation.episodes must be >= 1")

    return RunConfig(env_kind=env_kind, env=env, trainer=trainer,
                     eval_episodes=eval_episodes, raw=data)


def load_config(path) -> RunConfig:
    """Load and validate a YAML run configuration file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfigError(f"config root in {path} must be a mapping")
    return build_run_config(data, base_dir=path.parent)


def override_seed(config: RunConfig, seed: int) -> RunConfig:
    """New RunConfig with a replacement training seed, raw document included."""
    raw = dict(config.raw)
    raw["training"] = dict(raw.get("training", {}))
    raw["training"]["seed"] = seed
    return RunConfig(
        env_kind=config.env_kind,
        env=config.env,
        trainer=replace(config.trainer, seed=seed),
        eval_episodes=config.eval_episodes,
        raw=raw,
    )
