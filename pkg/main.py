#!/usr/bin/env python3
"""
DriftLab - Main Entry Point.

Usage:
    python main.py calibrate --config configs/gaussian_toy.json --out data/runs/toy
    python main.py sample --config configs/gaussian_toy.json --table data/runs/toy/calibration.json
    python main.py evaluate --config configs/gaussian_toy.json --samples-a data/runs/toy/samples.qdlb --analytic
    python main.py stability --config configs/gaussian_toy.json --calibration data/runs/toy
    python main.py validate-assumptions --config configs/gaussian_toy.json
"""

import argparse
import os
import sys
from pathlib import Path


def setup_python_path():
    """Add project root to Python path."""
    project_root = Path(__file__).parent
    if str(project_root) not in sys.path:
        sys.path.insert(0, str(project_root))


def _seed(value: str) -> int:
    seed = int(value, 0)
    if not 0 <= seed < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return seed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="DriftLab - quantization-aware drift correction for diffusion samplers"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="Experiment config JSON (defaults apply when omitted)")
    common.add_argument("--out", default=None, help="Output directory (overrides config output_dir)")
    common.add_argument("--seed", type=_seed, default=None, help="Master seed (overrides config seed)")
    common.add_argument("--threads", type=int, default=None, help="Worker threads (env: DRIFTLAB_THREADS)")
    common.add_argument("--debug", action="store_true", help="Enable debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common], help="Offline calibration of the drift factors")

    sample = sub.add_parser("sample", parents=[common], help="Online sampling")
    sample.add_argument("--table", default=None, help="Calibration table JSON")

    evaluate = sub.add_parser("evaluate", parents=[common], help="Moment and energy-distance report")
    evaluate.add_argument("--samples-a", required=True, help="Sample batch to evaluate")
    target = evaluate.add_mutually_exclusive_group(required=True)
    target.add_argument("--samples-b", default=None, help="Reference sample batch")
    target.add_argument("--analytic", action="store_true", help="Compare against the configured data law")

    stability = sub.add_parser("stability", parents=[common], help="Subsample envelopes and stress tables")
    stability.add_argument("--calibration", required=True, help="Directory written by calibrate")

    sub.add_parser("validate-assumptions", parents=[common], help="Gaussianity, correlation and isotropy checks")
    return parser


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)

    setup_python_path()
    if args.debug:
        os.environ["LOG_LEVEL"] = "DEBUG"

    from src.api.commands import run_command
    from src.core.config import configure_logging, get_settings

    get_settings.cache_clear()
    configure_logging()
    return run_command(args)


if __name__ == "__main__":
    sys.exit(main())
