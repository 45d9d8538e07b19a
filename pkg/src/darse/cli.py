"""Command-line entry point: ``darse <command> --config cfg.yaml [...]``.

Exit codes are the same for every command:

    0  success
    1  configuration or input error (including an exceeded enumeration cap)
    2  degenerate input (all-zero importances, infeasible budget)
    3  numeric or evaluator failure
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .commands import run_allocate, run_group_sweep, run_oracle, run_report, run_search
from .config import load_config
from .errors import DegenerateInputError, EvaluatorError, InvalidInputError, NumericFailureError

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_NUMERIC = 0, 1, 2, 3

DATASET_HELP = """\
Toy multitask datasets (objective.dataset) are comma-separated with no header:
one sample per line, the feature values first, then the polarity score in
[-1, 1], then the integer class label in 0..4.
"""

OUTPUT_HELP = """\
outputs (written to --out, or the config's output_dir):
  allocate  allocation.result
  search    best.result, history.log, report.csv
  oracle    oracle.result
  sweep     sweep.csv
  report    report.csv, and uniform.csv when --config is given

exit codes: 0 ok, 1 config error, 2 degenerate input, 3 numeric/evaluator failure
"""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="override the config's seed")
    common.add_argument("--out", type=Path, help="override the config's output_dir")
    common.add_argument("--jobs", type=int, help="parallel evaluations (0 = sequential)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="darse",
        description="Rank-space exploration for budget-constrained low-rank adapters.",
        epilog=OUTPUT_HELP + "\n" + DATASET_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, text in [
        ("allocate", "split a rank budget by singular-value importance"),
        ("search", "coarse then fine greedy search over rank vectors"),
        ("oracle", "exact optimum by dynamic programming or enumeration"),
        ("sweep", "evaluate every per-group uniform rank combination"),
    ]:
        sub.add_parser(name, parents=[common], help=text, description=text, epilog=DATASET_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    rep = sub.add_parser("report", parents=[common], help="CSV summaries of history logs",
                         description="Merge history logs into report.csv; with --config also "
                                     "write the uniform-rank table uniform.csv.")
    rep.add_argument("history", nargs="*", type=Path,
                     help="history.log files (default: history.log in the output directory)")
    return parser


def _run(args) -> None:
    cfg = None
    if args.config is not None:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out, jobs=args.jobs)
    elif args.command != "report":
        raise InvalidInputError(f"{args.command} needs --config")

    if args.command == "allocate":
        run_allocate(cfg)
    elif args.command == "search":
        run_search(cfg)
    elif args.command == "oracle":
        run_oracle(cfg)
    elif args.command == "sweep":
        run_group_sweep(cfg)
    else:
        out = args.out if args.out is not None else (cfg.path(cfg.output_dir) if cfg else Path("."))
        paths = args.history or [out / "history.log"]
        run_report(paths, out, cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except (NumericFailureError, EvaluatorError) as exc:
        print(f"darse: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DegenerateInputError as exc:
        print(f"darse: degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (InvalidInputError, OSError, KeyError) as exc:
        print(f"darse: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
