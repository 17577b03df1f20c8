"""Command line entry point: ``clog run | report | grid``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from clog.domain import RunConfig
from clog.errors import ClogError


def _load_config(path: str) -> RunConfig:
    return RunConfig.from_json(path)


def cmd_run(args) -> int:
    from clog.runner import load_resume_state, run_benchmark

    config = _load_config(args.config)
    orders = [args.order] if args.order is not None else None
    resume = {}
    if args.resume:
        saved = load_resume_state(args.resume)
        resume[int(saved["order_id"])] = args.resume
        if orders is None:
            orders = config.class_order_ids
    bundle = run_benchmark(config, orders, output_dir=config.output_dir, resume=resume, workers=args.workers)
    out = Path(config.output_dir) / bundle.run_id
    _print_summary(bundle, out)
    return 0 if not bundle.incomplete_orders else 3


def cmd_grid(args) -> int:
    from clog.runner import grid_search

    config = _load_config(args.config)
    result = grid_search(config)
    print(
        json.dumps(
            {"param": result.param, "values": result.values, "afq": result.afqs, "chosen": result.chosen},
            allow_nan=True,
        )
    )
    return 0


def cmd_report(args) -> int:
    from clog.report import emit_report
    from clog.runner import ResultBundle

    bundles = [ResultBundle.load(b) for b in args.bundle]
    out = Path(args.out or args.bundle[0])
    for path in emit_report(bundles, out, args.format):
        print(path)
    return 0


def _print_summary(bundle, out: Path) -> None:
    from clog.metrics import format_mean_std

    agg = bundle.aggregate
    print(f"run {bundle.run_id} -> {out}")
    if agg is not None:
        for name in ("aiq", "afq", "fr"):
            print(f"  {name.upper():4s} {format_mean_std(*agg.mean_std[name])}")
    if bundle.incomplete_orders:
        print(f"  incomplete orders: {bundle.incomplete_orders}")
    print(f"  bundle hash {bundle.content_hash()}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clog", description="Continual learning of generative models at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one strategy over the configured class orders")
    run.add_argument("--config", required=True)
    run.add_argument("--order", type=int, help="run a single class order")
    run.add_argument("--resume", help="state file written after a finished task")
    run.add_argument("--workers", type=int, default=1)
    run.set_defaults(func=cmd_run)

    grid = sub.add_parser("grid", help="search the strategy weight on class order 1")
    grid.add_argument("--config", required=True)
    grid.set_defaults(func=cmd_grid)

    report = sub.add_parser("report", help="write summary, curve and resource tables")
    report.add_argument("--bundle", required=True, nargs="+")
    report.add_argument("--format", default="csv")
    report.add_argument("--out", help="output directory (default: first bundle)")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ClogError, ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
