"""Command-line experiment runner.

    qpert run <config.toml> [--out DIR] [--workers N]
    qpert validate <config.toml>
    qpert list-experiments

Exit codes: 0 success, 2 configuration error (unreadable/malformed/unknown
fields), 3 validation error (instability, unbounded or oversized
perturbation), 4 runtime abort (too many capped replicas or an internal
failure during the run).  The ``QPERT_OUTPUT_DIR`` environment variable
overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import EXPERIMENTS, load_config
from .errors import ConfigError, QpertError, SimulationAbort

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_RUNTIME = 4

# every package error that is not a parse problem or a runtime abort marks
# an inadmissible model/experiment combination
_VALIDATION_ERRORS = QpertError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qpert",
        description="Busy-period experiments for the randomly modulated M/M/1 queue",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute an experiment config")
    run.add_argument("config", type=Path)
    run.add_argument("--out", type=Path, default=None, help="override output directory")
    run.add_argument("--workers", type=int, default=None, help="override worker count")

    val = sub.add_parser("validate", help="parse and validate a config, run nothing")
    val.add_argument("config", type=Path)

    sub.add_parser("list-experiments", help="print the known experiment kinds")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)

    if args.command == "list-experiments":
        for name in EXPERIMENTS:
            print(name)
        return EXIT_OK

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    if args.command == "validate":
        print(f"ok: {cfg.experiment} experiment, seed {cfg.seed}")
        return EXIT_OK

    if args.out is not None:
        cfg.output_dir = args.out
    if args.workers is not None and args.workers > 0:
        cfg.workers = args.workers

    from .experiments import run_experiment

    try:
        manifest = run_experiment(cfg)
    except SimulationAbort as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except _VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    print(f"wrote {manifest['files']['results']} (backend={manifest['backend']}, "
          f"wall={manifest['wall_time_s']:.2f}s)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
