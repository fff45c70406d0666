"""Command-line front end.

Subcommands: train, eval, export-values, validate-config. Results go to
stdout as JSON; progress and diagnostics go to stderr through logging,
filtered by the SDQL_LOG_LEVEL environment variable (error, info, debug).

Exit codes: 0 on success, 2 for usage and configuration errors, 3 for
runtime failures (diverged training, corrupt state, unexpected exceptions).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from ..environments import CargoEnv, GridWorldEnv, ManipulatorEnv
from ..environments.manipulator import ArmState
from ..environments.cargo import CargoState
from ..errors import CheckpointError, InvalidConfigError, SdqlError
from ..staged_mdp import Box
from ..stacked_trainer import StackedTrainer, merged_value
from .checkpoint import load_trainer, save_checkpoint
from .config import RunConfig, load_config, override_seed

log = logging.getLogger("sdql.cli")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get("SDQL_LOG_LEVEL", "info").strip().lower()
    if name not in _LOG_LEVELS:
        raise InvalidConfigError(
            f"SDQL_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got {name!r}"
        )
    logging.basicConfig(
        level=_LOG_LEVELS[name],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdql",
        description="Train and inspect stacked Q-learning policies on staged tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run backward stage-by-stage training")
    p_train.add_argument("--config", help="YAML run configuration")
    p_train.add_argument("--resume", help="checkpoint to continue training from")
    p_train.add_argument("--out", help="write the trained state to this checkpoint file")
    p_train.add_argument("--seed-override", type=int, help="replace the configured seed")

    p_eval = sub.add_parser("eval", help="evaluate a trained checkpoint greedily")
    p_eval.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p_eval.add_argument("--episodes", type=int, help="number of evaluation episodes")
    p_eval.add_argument("--out", help="also write per-step trajectories to this CSV file")
    p_eval.add_argument("--seed-override", type=int, help="seed for the evaluation stream")

    p_exp = sub.add_parser("export-values", help="export the merged value function as CSV")
    p_exp.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p_exp.add_argument("--out", required=True, help="CSV file to write")

    p_val = sub.add_parser("validate-config", help="check a configuration and exit")
    p_val.add_argument("--config", required=True, help="YAML run configuration")
    return parser


def _cmd_train(args) -> int:
    if bool(args.config) == bool(args.resume):
        raise InvalidConfigError("train needs exactly one of --config or --resume")
    if args.resume:
        if args.seed_override is not None:
            raise InvalidConfigError("--seed-override cannot be combined with --resume")
        config, trainer = load_trainer(args.resume)
        log.info("resuming from %s at phase %d", args.resume, trainer.phase)
    else:
        config = load_config(args.config)
        if args.seed_override is not None:
            config = override_seed(config, args.seed_override)
        trainer = StackedTrainer(config.env, config.trainer)
    trainer.train()
    if args.out:
        save_checkpoint(args.out, config, trainer)
        log.info("checkpoint written to %s", args.out)
    print(json.dumps({
        "env": config.env_kind,
        "env_steps": trainer.total_env_steps,
        "learn_calls": trainer.learn_calls,
        "checkpoint": args.out,
    }))
    return 0


def _action_columns(env) -> list[str]:
    width = 1
    for stage in range(1, env.n_stages + 1):
        space = env.action_space(stage)
        if isinstance(space, Box):
            width = max(width, space.dim)
    return [f"a{i}" for i in range(width)]


def _action_values(action, width: int) -> list:
    vals = np.asarray(action, dtype=np.float64).ravel().tolist() if np.ndim(action) else [action]
    return vals + [""] * (width - len(vals))


def _cmd_eval(args) -> int:
    config, trainer = load_trainer(args.checkpoint)
    episodes = args.episodes if args.episodes is not None else config.eval_episodes
    if episodes < 1:
        raise InvalidConfigError(f"--episodes must be >= 1, got {episodes}")
    rng = np.random.default_rng(args.seed_override) if args.seed_override is not None else None
    env = trainer.env
    if args.out:
        action_cols = _action_columns(env)
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "step", "stage", *env.state_component_names(),
                             *action_cols, "reward", "ret"])

            def record(ep, step, stage, state, action, reward, ep_return):
                writer.writerow([ep, step, stage, *env.state_components(state),
                                 *_action_values(action, len(action_cols)), reward, ep_return])

            stats = trainer.evaluate(episodes, rng=rng, on_step=record)
        log.info("trajectories written to %s", args.out)
    else:
        stats = trainer.evaluate(episodes, rng=rng)
    print(json.dumps(stats.as_dict()))
    return 0


def _export_rows(env, modules):
    if isinstance(env, GridWorldEnv):
        header = ["row", "col", "stage", "value"]
        rows = []
        for core in env.core_states():
            state = env.state_from_core(core)
            rows.append([core[0], core[1], env.stage_of(state),
                         merged_value(env, modules, state)])
        return header, rows
    if isinstance(env, ManipulatorEnv):
        header = ["theta1", "theta2", "stage", "value"]
        rows = []
        grid = np.linspace(-math.pi, math.pi, 64, endpoint=False)
        for t1 in grid:
            for t2 in grid:
                state = ArmState(float(t1), float(t2), env.fresh_stage(t1, t2))
                rows.append([float(t1), float(t2), state.stage,
                             merged_value(env, modules, state)])
        return header, rows
    if isinstance(env, CargoEnv):
        header = ["x", "y", "stage", "value"]
        rows = []
        for iy in range(env.height):
            for ix in range(env.width):
                x, y = ix + 0.5, iy + 0.5
                if env._occupied(x, y):
                    rows.append([x, y, "", float("nan")])
                    continue
                state = CargoState(x, y, 0.0, env.fresh_stage(x))
                rows.append([x, y, state.stage, merged_value(env, modules, state)])
        return header, rows
    raise InvalidConfigError(f"no value export defined for {type(env).__name__}")


def _cmd_export_values(args) -> int:
    config, trainer = load_trainer(args.checkpoint)
    header, rows = _export_rows(trainer.env, trainer.modules)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    log.info("%d values written to %s", len(rows), args.out)
    print(json.dumps({"env": config.env_kind, "rows": len(rows), "out": args.out}))
    return 0


def _cmd_validate_config(args) -> int:
    config = load_config(args.config)
    # construct the trainer so module/action-space pairings are checked too
    trainer = StackedTrainer(config.env, config.trainer)
    print(json.dumps({
        "valid": True,
        "env": config.env_kind,
        "stages": trainer.env.n_stages,
        "modules": [m.kind for m in config.trainer.module_configs],
    }))
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "export-values": _cmd_export_values,
    "validate-config": _cmd_validate_config,
}


def run(argv=None) -> int:
    """Parse arguments and execute; returns the process exit code."""
    try:
        _setup_logging()
    except InvalidConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except (InvalidConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SdqlError as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("unexpected failure", exc_info=True)
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
