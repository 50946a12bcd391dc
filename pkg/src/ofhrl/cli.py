"""Command line entry point.

Verbs: gen-data, train-world, train-agent, transfer, eval, options-trace.
Flags mirror RunConfig fields; a plain-text key=value --config file supplies
defaults that explicit flags override. Exit code 0 on success, 1 with a
diagnostic line on any pipeline error.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import fields
from pathlib import Path

from .errors import OfhrlError
from .pipeline import (RunConfig, cmd_eval, cmd_gen_data, cmd_options_trace,
                       cmd_train_agent, cmd_train_world, cmd_transfer)

COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-world": cmd_train_world,
    "train-agent": cmd_train_agent,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "options-trace": cmd_options_trace,
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None,
                        help="key=value config file; flags override its values")
    base = RunConfig()
    for field in fields(RunConfig):
        flag = "--" + field.name.replace("_", "-")
        default = getattr(base, field.name)
        if isinstance(default, bool):
            parser.add_argument(flag, default=None, type=_parse_bool, metavar="0|1")
        elif isinstance(default, int):
            parser.add_argument(flag, default=None, type=int)
        elif isinstance(default, float):
            parser.add_argument(flag, default=None, type=float)
        else:
            parser.add_argument(flag, default=None)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "on", "yes"):
        return True
    if lowered in ("0", "false", "off", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ofhrl",
        description="Offline hierarchical RL pipeline: learned pessimistic "
                    "world model + latent action codec + option learners.")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        _add_config_flags(sub)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise OfhrlError(f"config file not found: {path}")
        config = RunConfig.from_text(path.read_text(encoding="utf-8"))
    else:
        config = RunConfig()
    for field in fields(RunConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            setattr(config, field.name, value)
    return config


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = config_from_args(args)
        COMMANDS[args.command](config)
    except (OfhrlError, ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
