"""Command-line entry point.

    diffplan <subcommand> [--config FILE] [--set key=value]...

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
import traceback

from . import experiments
from .config import ConfigError, RunConfig, apply_overrides, load_config

COMMANDS = {
    "collect": experiments.cmd_collect,
    "train-prior": experiments.cmd_train_prior,
    "train-reward": experiments.cmd_train_reward,
    "finetune": experiments.cmd_finetune,
    "plan": experiments.cmd_plan,
    "eval-adaptation": experiments.cmd_eval_adaptation,
    "ablate-deploy": experiments.cmd_ablate_deploy,
    "plot": experiments.cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffplan",
        description="trajectory-diffusion planning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0]
                           if fn.__doc__ else None)
        p.add_argument("--config", default=None, metavar="FILE",
                       help="key=value config file; defaults apply otherwise")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       dest="overrides", help="override one config key")
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, args.overrides)


def _report(name: str, result: dict) -> None:
    parts = []
    for key, value in result.items():
        if isinstance(value, (dict, list, tuple)):
            continue
        if isinstance(value, float):
            value = f"{value:.6g}"
        parts.append(f"{key}={value}")
    print(f"{name}: " + " ".join(parts))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 3
    _report(args.command, result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
