"""``sentinel`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import __version__, pipeline
from .config import ConfigError, deep_update, load_config, parse_assignment
from .errors import MissingArtifactError, NumericFailure, SentinelError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

COMMANDS = {
    "synth-data": "generate the synthetic slide cohort",
    "segment": "detect tissue and write contours per slide",
    "tile": "cut labeled tiles and assign the slide split",
    "stain-profile": "compute the target stain profile",
    "normalize": "stain-normalize every tile",
    "train-tiles": "train the tile classifier",
    "heatmap": "predict all tiles and assemble heatmaps",
    "features": "extract slide-level features",
    "train-slide": "train the slide-level forest",
    "evaluate": "score test slides and write the report",
    "run-all": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--workdir", help="artifact directory (overrides config)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. training.epochs=3")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sentinel", description="Slide-level tumor detection pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("evaluate", "run-all"):
            p.add_argument("--report", help="report path (default: <workdir>/eval/report.json)")
    return parser


def resolve_config(args) -> dict:
    overrides: dict = {}
    for item in args.set:
        deep_update(overrides, parse_assignment(item))
    for key in ("workdir", "seed", "workers"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "run-all":
            summary = pipeline.run_all(cfg, args.report)
        elif args.command == "evaluate":
            summary = pipeline.evaluate(cfg, args.report)
        else:
            summary = pipeline.STAGES[args.command](cfg)
    except ConfigError as exc:
        print(f"sentinel: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifactError as exc:
        print(f"sentinel: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericFailure as exc:
        print(f"sentinel: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SentinelError, ValueError) as exc:
        print(f"sentinel: {exc}", file=sys.stderr)
        return EXIT_ERROR
    shown = {k: v for k, v in summary.items() if k not in ("parameters", "inputs_digest")}
    print(json.dumps(shown, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
