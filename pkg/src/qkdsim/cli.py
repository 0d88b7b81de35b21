"""Command-line entry point: ``qkdsim run`` and ``qkdsim stats``.

Log verbosity comes from ``QKDSIM_LOG`` (e.g. ``QKDSIM_LOG=info``).
"""

import argparse
import logging
import os
import sys

from .scenario import ScenarioError, format_stats, load_scenario, run_scenario

REPORT_NAME = "report.txt"


def _run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    transcripts = os.path.join(args.out, "transcripts") if args.transcripts else None
    status, report = run_scenario(scenario, args.seed, transcripts)
    path = os.path.join(args.out, REPORT_NAME)
    with open(path, "w") as fh:
        fh.write(report)
    if status:
        print(f"{path}: one or more steps failed unexpectedly", file=sys.stderr)
    else:
        print(path)
    return status


def _stats(args) -> int:
    try:
        with open(args.report) as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        sys.stdout.write(format_stats(text))
    except ValueError as exc:
        print(f"error: {args.report}: {exc}", file=sys.stderr)
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkdsim", description="Seeded QKD network simulations.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario file and write a report")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, default=None, help="run seed (default: the scenario's seed line, else 0)")
    run.add_argument("--out", default="out", help="output directory (default: out)")
    run.add_argument("--transcripts", action="store_true", help="dump classical-channel transcripts per session")
    run.set_defaults(func=_run)

    stats = sub.add_parser("stats", help="summarize a report")
    stats.add_argument("report")
    stats.set_defaults(func=_stats)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("QKDSIM_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
