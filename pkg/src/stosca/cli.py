"""Command line entry point: ``stosca run|summarize|speedup|fetch-data``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import bench
from .block_parallel import measure_speedup
from .data import KNOWN_DATASETS, fetch

log = logging.getLogger("stosca")


def _cmd_run(args) -> int:
    overrides = list(args.set or [])
    if args.output:
        overrides.append(f"output_dir={json.dumps(args.output)}")
    cfg = bench.ExperimentConfig.load(args.config, overrides)
    records, failures = bench.run_experiment(cfg)
    for row in bench.summarize(records)[0]:
        print(json.dumps(row))
    if failures:
        log.warning("%d of %d runs failed; see %s", len(failures), len(records), Path(cfg.output_dir) / "failures.json")
        return 2
    return 0


def _cmd_summarize(args) -> int:
    records = bench.read_records(args.records)
    out = Path(args.output or args.records)
    path = bench.write_summary(records, out)
    print(path.read_text(), end="")
    return 0 if all(r.status == "ok" for r in records) else 2


def _cmd_speedup(args) -> int:
    inst = bench.random_ridge_instance(args.q, rank=args.rank, seed=args.seed, dense=args.rank is None)
    rows = measure_speedup(inst, args.c, args.workers, args.reps)
    w = csv.DictWriter(sys.stdout, fieldnames=["C", "workers", "median_s", "speedup"])
    w.writeheader()
    for r in rows:
        w.writerow(r)
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["C", "workers", "median_s", "speedup"])
            w.writeheader()
            w.writerows(rows)
    return 0


def _cmd_fetch(args) -> int:
    names = list(KNOWN_DATASETS) if args.name == "all" else [args.name]
    status = 0
    for name in names:
        try:
            print(fetch(name, args.data_dir))
        except Exception as exc:
            log.error("could not fetch %s: %s", name, exc)
            status = 2
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stosca", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an optimizer comparison")
    r.add_argument("config", nargs="?", help="JSON experiment config (defaults apply when omitted)")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    r.add_argument("-o", "--output", help="output directory")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("summarize", help="summarize a directory of run records")
    s.add_argument("records")
    s.add_argument("-o", "--output")
    s.set_defaults(func=_cmd_summarize)

    t = sub.add_parser("speedup", help="time block-parallel surrogate solves")
    t.add_argument("--q", type=int, default=2000)
    t.add_argument("--rank", type=int, default=None, help="low-rank factor rows (dense when omitted)")
    t.add_argument("--c", type=int, nargs="+", default=[1, 2, 4, 8])
    t.add_argument("--workers", type=int, nargs="+", default=[1])
    t.add_argument("--reps", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("-o", "--output")
    t.set_defaults(func=_cmd_speedup)

    f = sub.add_parser("fetch-data", help="download a UCI dataset (optional)")
    f.add_argument("name", choices=sorted(KNOWN_DATASETS) + ["all"])
    f.add_argument("--data-dir", default="data")
    f.set_defaults(func=_cmd_fetch)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
