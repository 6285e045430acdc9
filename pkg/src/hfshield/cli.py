"""Command-line entry point: ``hfshield <subcommand> --config <path> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import traceback

from .pipeline import STAGES, ConfigError, StageInputError, load_config, run_stage

EXIT_OK, EXIT_INTERNAL, EXIT_INPUTS, EXIT_CONFIG = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfshield", description=__doc__)
    parser.add_argument("subcommand", choices=(*STAGES, "run_all"))
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", help="override the config's out_dir")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--arm", help="restrict attack/purify/personalize/generate to one arm")
    parser.add_argument("--purifier", help="restrict purify/personalize/generate to one purifier label")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg = dataclasses.replace(cfg, out_dir=args.out)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError([f"--seed must be non-negative, got {args.seed}"])
            cfg = dataclasses.replace(cfg, seed=args.seed)
    except ConfigError as exc:
        print(f"hfshield: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        built = run_stage(cfg, args.subcommand, arm=args.arm, purifier=args.purifier)
    except StageInputError as exc:
        print(f"hfshield {args.subcommand}: {exc}", file=sys.stderr)
        return EXIT_INPUTS
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL
    print(f"{args.subcommand}: {built} item(s) built in {cfg.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
