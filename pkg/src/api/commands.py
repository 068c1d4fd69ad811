"""
DriftLab - Command Handlers.

One handler per subcommand. Handlers load the experiment config, run the
orchestrator and print a one-line JSON summary on stdout. Failures become a
one-line JSON error object on stderr and a nonzero exit code:
2 config error, 3 I/O error, 4 numerical failure.
"""

import argparse
import logging
import sys
from typing import Any, Callable

from pydantic import ValidationError

from src.api.schemas import ExperimentConfig, load_config
from src.app.orchestrator import ExperimentOrchestrator, create_orchestrator
from src.core.config import resolve_threads
from src.core.exceptions import ArtifactError, ConfigurationError, DriftLabError
from src.infra.persistence.repository import canonical_json

logger = logging.getLogger(__name__)

EXIT_OK = 0


def _build(args: argparse.Namespace) -> ExperimentOrchestrator:
    config = load_config(args.config) if args.config else ExperimentConfig()
    return create_orchestrator(
        config,
        out_dir=args.out,
        seed=args.seed,
        threads=resolve_threads(args.threads),
    )


def cmd_calibrate(args: argparse.Namespace) -> dict[str, Any]:
    return _build(args).calibrate()


def cmd_sample(args: argparse.Namespace) -> dict[str, Any]:
    return _build(args).sample(table_path=args.table)


def cmd_evaluate(args: argparse.Namespace) -> dict[str, Any]:
    return _build(args).evaluate(args.samples_a, args.samples_b, analytic=args.analytic)


def cmd_stability(args: argparse.Namespace) -> dict[str, Any]:
    return _build(args).stability(args.calibration)


def cmd_validate_assumptions(args: argparse.Namespace) -> dict[str, Any]:
    return _build(args).validate_assumptions()


COMMANDS: dict[str, Callable[[argparse.Namespace], dict[str, Any]]] = {
    "calibrate": cmd_calibrate,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "stability": cmd_stability,
    "validate-assumptions": cmd_validate_assumptions,
}


def _report_error(error: DriftLabError) -> int:
    logger.error(f"❌ {error.message}" + (f" ({error.details})" if error.details else ""))
    sys.stderr.write(canonical_json(error.to_dict()) + "\n")
    return error.exit_code


def run_command(args: argparse.Namespace) -> int:
    """Dispatch a parsed command line and return the process exit code."""
    handler = COMMANDS[args.command]
    try:
        summary = handler(args)
    except DriftLabError as e:
        return _report_error(e)
    except ValidationError as e:
        return _report_error(ConfigurationError("Invalid experiment config", str(e)))
    except OSError as e:
        return _report_error(ArtifactError("I/O failure", str(e)))

    sys.stdout.write(canonical_json(summary) + "\n")
    return EXIT_OK
