import argparse
import logging
import os
import sys
import uuid
from pathlib import Path

from moyal.config import load_config, load_environment
from moyal.errors import AcceptanceFailure, ConfigError, MoyalError
from moyal.harness import EXPERIMENTS, ExperimentSpec, run_coeffs, run_validate
from moyal.solve import SOLVERS
from moyal.stencil import set_max_order

logger = logging.getLogger("moyal")

# Configuration
OUTPUT_ROOT = Path("results")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_ACCEPTANCE = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def get_run_dir(kind: str, out: str | None) -> Path:
    """Output directory for this run; a fresh one under results/ unless --out is given"""
    run_dir = Path(out) if out else OUTPUT_ROOT / f"{kind}-{uuid.uuid4().hex[:8]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def configure_logging(verbose: bool, environment: dict) -> None:
    level = "DEBUG" if verbose else environment.get("MOYAL_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT)


def build_parser(environment: dict) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moyal",
        description="Steady-state Wigner-Moyal transport with tunable observation windows",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    run_options = argparse.ArgumentParser(add_help=False)
    run_options.add_argument("--config", help="INI run configuration")
    run_options.add_argument("--out", help="output directory (default: results/<kind>-<id>)")
    run_options.add_argument(
        "--jobs", type=int, default=int(environment.get("MOYAL_JOBS", 1)), help="worker processes"
    )
    run_options.add_argument("--plot", action="store_true", help="write SVG figures")
    run_options.add_argument("--dump-matrix", type=Path, help="write the first assembled matrix as triples")
    run_options.add_argument("--solver", choices=sorted(SOLVERS), help="override [solver] method")
    run_options.add_argument("--tol", type=float, help="override [solver] tol")
    run_options.add_argument(
        "--lenient", action="store_true", help="report failed acceptance bars without exiting 1"
    )

    for kind in EXPERIMENTS:
        command = commands.add_parser(kind, parents=[run_options], help=f"run the {kind} experiment")
        command.set_defaults(handler=cmd_experiment)

    validate = commands.add_parser("validate", parents=[run_options], help="run the invariant suite")
    validate.set_defaults(handler=cmd_validate)

    coeffs = commands.add_parser("coeffs", help="print one finite-difference stencil")
    coeffs.add_argument("--derivative", "-d", type=int, required=True)
    coeffs.add_argument("--accuracy", "-m", type=int, required=True)
    coeffs.add_argument("--rational", action="store_true", help="exact fractions instead of floats")
    coeffs.add_argument("--csv", type=Path, help="also write the rows to a CSV file")
    coeffs.set_defaults(handler=cmd_coeffs)
    return parser


def _load(args, required: bool):
    if not args.config:
        if required:
            raise ConfigError(f"{args.command} needs --config")
        return None
    config = load_config(args.config)
    if args.solver:
        config.solver = args.solver
    if args.tol is not None:
        config.tol = args.tol
    set_max_order(config.max_order)
    return config


def cmd_experiment(args) -> int:
    config = _load(args, required=args.command not in ("cj", "weights"))
    spec = ExperimentSpec(
        kind=args.command,
        config=config,
        out_dir=get_run_dir(args.command, args.out),
        jobs=args.jobs,
        plot=args.plot,
        dump_matrix=args.dump_matrix,
        lenient=args.lenient,
    )
    logger.info("running %s into %s", args.command, spec.out_dir)
    try:
        EXPERIMENTS[args.command](spec)
    finally:
        for name, passed in spec.manifest.summary.get("acceptance", {}).items():
            print(f"{name},{'pass' if passed else 'FAIL'}")
    logger.info("%s finished", args.command)
    return EXIT_OK


def cmd_validate(args) -> int:
    config = _load(args, required=False)
    spec = ExperimentSpec(kind="validate", config=config, out_dir=get_run_dir("validate", args.out))
    seed = int(config.environment.get("MOYAL_SEED", 0)) if config else int(os.environ.get("MOYAL_SEED", 0))
    try:
        checks = run_validate(spec, seed=seed)
    finally:
        for check in spec.manifest.runs:
            print(f"{check['name']},{'pass' if check['passed'] else 'FAIL'},{check['detail']}")
    logger.info("validation passed (%d checks)", len(checks))
    return EXIT_OK


def cmd_coeffs(args) -> int:
    for line in run_coeffs(args.derivative, args.accuracy, args.rational, args.csv):
        print(line)
    return EXIT_OK


def main(argv=None) -> int:
    environment = load_environment()
    args = build_parser(environment).parse_args(argv)
    configure_logging(args.verbose, environment)
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error("configuration error: %s", e)
        return EXIT_CONFIG
    except AcceptanceFailure as e:
        for failure in e.failures:
            logger.error("failed: %s", failure)
        return EXIT_ACCEPTANCE
    except (MoyalError, ValueError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_SOLVER
    except Exception:
        logger.exception("unexpected error")
        return EXIT_ACCEPTANCE


if __name__ == "__main__":
    sys.exit(main())
