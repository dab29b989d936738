#!/usr/bin/env python3
"""
CLI for graph-based semi-supervised experiments.

    python run_experiment.py run --config configs/two_moons.json --seeds 5
    python run_experiment.py ablate --config configs/two_moons.json
    python run_experiment.py export-plots outputs/two_moons --render
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

# Ensure repo root is in python path
REPO_ROOT = Path(__file__).resolve().parent
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

from pydantic import ValidationError

from lib.experiment import (
    MissingArtifacts,
    cmd_ablate,
    cmd_export_plots,
    cmd_run,
    describe_plan,
    load_config,
    resolve_output_root,
)
from lib.trainer import TrainingAborted

EXIT_OK = 0
EXIT_INVALID_CONFIG = 2
EXIT_NAN_ABORT = 3
EXIT_MISSING_ARTIFACTS = 4

logger = logging.getLogger(__name__)


def _add_experiment_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        type=Path,
        required=True,
        help="Experiment config (JSON).",
    )
    parser.add_argument(
        "--seeds",
        type=int,
        default=None,
        help="Number of seeds (overrides the config).",
    )
    parser.add_argument(
        "--out",
        type=Path,
        default=None,
        help="Output root (overrides SIMGRAPH_OUTPUT_ROOT and the config).",
    )
    parser.add_argument(
        "--parallel",
        type=int,
        default=1,
        help="Seeds to train in parallel processes (default: 1).",
    )
    parser.add_argument(
        "--verbose", "-v",
        action="store_true",
        help="Enable per-step debug logging.",
    )
    parser.add_argument(
        "--dry-run",
        action="store_true",
        help="Validate the config and show the plan without training.",
    )


def parse_args(argv=None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Train and evaluate learned-similarity graph SSL on toy datasets."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="Train every seed of one method and summarize.")
    _add_experiment_args(run_parser)

    ablate_parser = sub.add_parser("ablate", help="Compare supervised-only, Pi model and the full method.")
    _add_experiment_args(ablate_parser)

    export_parser = sub.add_parser("export-plots", help="Write plot data for a finished run.")
    export_parser.add_argument("run_dir", type=Path, help="Experiment or seed directory.")
    export_parser.add_argument(
        "--render",
        action="store_true",
        help="Also render SVG figures (needs matplotlib).",
    )
    export_parser.add_argument("--verbose", "-v", action="store_true")

    return parser.parse_args(argv)


def _report_validation_error(exc: ValidationError) -> None:
    print(f"Invalid config: {exc.error_count()} error(s)", file=sys.stderr)
    for err in exc.errors():
        loc = ".".join(str(part) for part in err["loc"]) or "<root>"
        print(f"  {loc}: {err['msg']}", file=sys.stderr)


def main(argv=None) -> int:
    args = parse_args(argv)

    if args.command == "export-plots":
        if not logging.getLogger().handlers:
            logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s: %(message)s")
        try:
            written = cmd_export_plots(args.run_dir, render=args.render)
        except MissingArtifacts as exc:
            print(f"Missing artifacts under {args.run_dir}:", file=sys.stderr)
            for path in exc.missing:
                print(f"  - {path}", file=sys.stderr)
            return EXIT_MISSING_ARTIFACTS
        print(f"Wrote {len(written)} file(s).")
        return EXIT_OK

    try:
        if args.dry_run:
            cfg = load_config(args.config)
            if args.seeds is not None:
                cfg = cfg.model_copy(update={"seeds": args.seeds})
            exp_dir = resolve_output_root(cfg, args.out) / cfg.name
            for line in describe_plan(cfg, exp_dir, ablate=args.command == "ablate"):
                print(f"[DRY-RUN] {line}")
            return EXIT_OK

        if args.command == "run":
            summary = cmd_run(args.config, args.seeds, args.out, args.parallel, args.verbose)
            print(
                f"{summary.experiment} ({summary.kind}): error {summary.mean_error:.2f} +- "
                f"{summary.std_error:.2f}% over {len(summary.seeds)} seed(s)"
            )
        else:
            cmd_ablate(args.config, args.seeds, args.out, args.parallel, args.verbose)
    except ValidationError as exc:
        _report_validation_error(exc)
        return EXIT_INVALID_CONFIG
    except TrainingAborted as exc:
        logger.error(f"Training aborted: {exc}")
        print(f"Training aborted: non-finite {exc.term} at epoch {exc.epoch}, step {exc.step}", file=sys.stderr)
        return EXIT_NAN_ABORT
    except KeyboardInterrupt:
        return 130
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
