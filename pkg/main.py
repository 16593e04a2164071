"""
Command-line entry point.

    python main.py run configs/trace_audit.json
    python main.py check configs/prop23_audit.json
    python main.py frontier --a-min 1e-4 --a-max 0.2

Exit status: 0 when every acceptance check passes, 1 when a check fails,
2 on configuration or numerical errors.
"""
import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Fix Windows console encoding for Unicode characters
if sys.platform == "win32":
    sys.stdout.reconfigure(encoding="utf-8")
    sys.stderr.reconfigure(encoding="utf-8")

from config import load_config, validate_config  # noqa: E402
from errors import ChaoskitError  # noqa: E402
from experiments import run_experiment, write_outcome  # noqa: E402

logger = logging.getLogger("chaoskit")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


def _setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="[%(levelname)s] %(message)s",
        stream=sys.stdout,
    )
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.output_dir:
        config = config.model_copy(update={"output_dir": args.output_dir})
    outcome = run_experiment(config)
    run_dir = write_outcome(outcome, config)
    failed = [c.name for c in outcome.checks if not c.passed]
    if failed:
        logger.error(f"{len(failed)} check(s) failed: {', '.join(failed)} (see {run_dir / 'summary.json'})")
        return EXIT_CHECK_FAILED
    logger.info(f"all {len(outcome.checks)} checks passed; artifacts in {run_dir}")
    return EXIT_OK


def cmd_check(args) -> int:
    config = load_config(args.config)
    logger.info(f"{args.config}: valid {config.experiment.value} configuration")
    params = config.model.params()
    if not params.admissible:
        logger.warning(f"(a, eps) = ({params.a}, {params.eps}) lies outside the regime with positive WJ constants")
    return EXIT_OK


def cmd_frontier(args) -> int:
    raw = {
        "experiment": "constants_frontier",
        "output_dir": args.output_dir or "output",
        "model": {"dim": args.dim},
        "frontier": {"a_min": args.a_min, "a_max": args.a_max, "points": args.points, "eps": args.eps},
    }
    config = validate_config(raw)
    outcome = run_experiment(config)
    run_dir = write_outcome(outcome, config)
    a_star = outcome.metrics.get("a_star")
    if a_star is None:
        logger.info(f"no frontier in [{args.a_min}, {args.a_max}]; table in {run_dir}")
    else:
        logger.info(f"a* = {a_star:.6g} at eps = {args.eps}; table in {run_dir}")
    return EXIT_OK if outcome.passed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chaoskit",
        description="Numerical audits of uniform-in-time propagation of chaos for a double-well mean-field model",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiment named in a config file")
    run.add_argument("config", help="JSON config file")
    run.add_argument("--output-dir", help="override output_dir from the config")
    run.set_defaults(handler=cmd_run)

    check = sub.add_parser("check", help="validate a config file without running it")
    check.add_argument("config", help="JSON config file")
    check.set_defaults(handler=cmd_check)

    frontier = sub.add_parser("frontier", help="sweep the WJ constants over the well depth a")
    frontier.add_argument("--a-min", type=float, default=1e-4)
    frontier.add_argument("--a-max", type=float, default=0.2)
    frontier.add_argument("--eps", type=float, default=0.0)
    frontier.add_argument("--points", type=int, default=40)
    frontier.add_argument("--dim", type=int, default=1)
    frontier.add_argument("--output-dir")
    frontier.set_defaults(handler=cmd_frontier)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv(dotenv_path=".env", override=False)
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.handler(args)
    except ChaoskitError as e:
        logger.error(f"{e.module}: {e}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
