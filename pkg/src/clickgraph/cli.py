"""Command-line entry point: one subcommand per pipeline stage, plus ``run``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import STAGES, ConfigError, Experiment, ExperimentConfig, StageError, run_stage, smoke_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clickgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run"):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "run" else "run every stage in order")
        p.add_argument("--config", type=Path, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--level", type=float, help="restrict staged work to one early level (percent)")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-stable execution")
        p.add_argument("--out", type=Path, help="artifact directory (overrides the config)")
        p.add_argument("--smoke", action="store_true", help="use the built-in smoke config when --config is absent")
        p.add_argument("-v", "--verbose", action="store_true")
    dump = sub.add_parser("config", help="print a config as JSON")
    dump.add_argument("--smoke", action="store_true")
    return parser


def resolve_config(args) -> ExperimentConfig:
    if args.config is not None:
        config = ExperimentConfig.load(args.config)
    elif args.out is not None and (args.out / "config.json").exists():
        stored = json.loads((args.out / "config.json").read_text())["config"]
        config = ExperimentConfig.from_dict(stored)
    elif args.smoke:
        config = smoke_config()
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out = str(args.out)
    if args.deterministic:
        config.deterministic = True
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "config":
        cfg = smoke_config() if args.smoke else ExperimentConfig()
        print(json.dumps(cfg.to_dict(), indent=1))
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        exp = Experiment(config)
        if args.command == "run":
            exp.run(args.level)
        else:
            run_stage(exp, args.command, args.level)
    except StageError as err:
        print(f"clickgraph: stage '{err.stage}' failed: {err}", file=sys.stderr)
        return 2
    except ConfigError as err:
        print(f"clickgraph: stage 'config' failed: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
