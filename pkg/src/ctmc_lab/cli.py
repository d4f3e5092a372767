"""Command-line entry point: ``run``, ``sweep``, ``validate`` and ``fit``.

Exit codes: 0 success, 2 configuration or input error, 3 sampler failure.
Tokens and state indices are 0-based everywhere.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_experiment, load_sweep, read_json
from .errors import CTMCLabError, SamplerError
from .runner import cli_run, cli_sweep, fit_slope, worker_count

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SAMPLER = 3


def _cmd_run(args) -> int:
    cfg = load_experiment(read_json(args.config))
    report = cli_run(cfg, threads=worker_count())
    if not cfg.output:
        sys.stdout.write(report.jsonl())
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = load_experiment(read_json(args.config))
    print(f"ok {cfg.config_hash()}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    sweep = load_sweep(read_json(args.sweep))
    threads = worker_count()
    path = args.out or sweep.output_csv
    if path:
        with open(path, "w", newline="") as fh:
            rows = cli_sweep(sweep, threads, fh)
    else:
        rows = cli_sweep(sweep, threads, sys.stdout)
    failed = sum(1 for r in rows if r["error"])
    if failed:
        logging.getLogger(__name__).warning("%d of %d sweep points failed", failed, len(rows))
    return EXIT_OK


def _cmd_fit(args) -> int:
    fit = fit_slope(args.csv, args.x, args.y)
    print(json.dumps({"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2, "rows": fit.used, "dropped": fit.dropped}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctmc-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and emit a JSONL record")
    run.add_argument("config")
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate", help="check a config against the schema")
    val.add_argument("config")
    val.set_defaults(func=_cmd_validate)

    sw = sub.add_parser("sweep", help="run a cross-product sweep and emit CSV")
    sw.add_argument("sweep")
    sw.add_argument("-o", "--out", help="CSV path (default: sweep output_csv or stdout)")
    sw.set_defaults(func=_cmd_sweep)

    fit = sub.add_parser("fit", help="log-log least-squares slope between two CSV columns")
    fit.add_argument("csv")
    fit.add_argument("--x", required=True)
    fit.add_argument("--y", required=True)
    fit.set_defaults(func=_cmd_fit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SamplerError as exc:
        print(f"sampler error: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    except CTMCLabError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
