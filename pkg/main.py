"""
Main entry point for the pilot-wave lab.

Runs declarative JSON specs that propagate a wavefunction under a
(possibly non-Hermitian) electromagnetic coupling, integrate guidance
trajectories with their Weyl scale factor, and write CSV/JSON datasets.

Usage:
    python main.py run <spec.json> [--out DIR]
    python main.py validate <spec.json>
    python main.py figures sinx --out DIR
    python main.py version
"""

import argparse
import logging
import sys
from typing import List, Optional

from app.lab_app import PilotWaveLabApp
from config.run_spec import PRESETS, load_run_spec
from config.settings import app_config
from models.errors import LabError

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=app_config.APP_NAME, description=__doc__.strip().splitlines()[0])
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="propagate a spec and run its experiments")
    run.add_argument("spec", help="path to a JSON run spec")
    run.add_argument("--out", default=None, help="output directory (overrides the spec)")

    validate = commands.add_parser("validate", help="validate a spec without computing")
    validate.add_argument("spec", help="path to a JSON run spec")

    figures = commands.add_parser("figures", help="run a built-in preset and write its datasets")
    figures.add_argument("preset", choices=sorted(PRESETS))
    figures.add_argument("--out", required=True, help="output directory")

    commands.add_parser("version", help="print the version")
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    elif args.quiet:
        logging.getLogger().setLevel(logging.WARNING)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)

    if args.command == "version":
        print(f"{app_config.APP_NAME} {app_config.VERSION}")
        return 0

    try:
        if args.command == "validate":
            spec = load_run_spec(args.spec)
            print(f"{args.spec}: valid ({spec.system.value}, {spec.n_steps} steps, "
                  f"{len(spec.experiments)} experiments)")
            return 0
        if args.command == "run":
            spec = load_run_spec(args.spec)
            output_dir = args.out
        else:
            spec = PRESETS[args.preset](args.out)
            output_dir = args.out
        result = PilotWaveLabApp(spec, output_dir=output_dir).run()
        return result.exit_status
    except LabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logging.error(f"Application failed: {e}")
        raise


if __name__ == "__main__":
    sys.exit(main())
