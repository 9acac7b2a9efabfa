"""Command line entry point: ``quickin <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .domain import parse_ts
from .errors import EmptyReportError, KAnonymityRefused, QuickinError
from .gateway import StoreLayout
from .privacy import EncryptedStore, k_report
from .quickin_core import RetentionConfig, retention_sweep
from .sim import ScenarioConfig, run_scenario
from .stats import export_stats_csv

DEFAULT_STORE = os.environ.get("QUICKIN_STORE", "store")
EXIT_REFUSED = 3


def _write(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _records(layout: StoreLayout, service_ids):
    keys = layout.keys()
    out = []
    for sid in service_ids:
        out.extend(layout.completed(sid, keys).records())
    return out


def _services(layout: StoreLayout, wanted):
    found = layout.completed_service_ids()
    if wanted is None:
        return found
    if wanted not in found:
        raise QuickinError(f"no completed-session store for service {wanted} in {layout.root}")
    return [wanted]


def cmd_simulate(args) -> int:
    with open(args.config) as fh:
        raw = json.load(fh)
    if args.seed is not None:
        raw["rng_seed"] = args.seed
        if "generate" in raw:
            raw["generate"]["seed"] = args.seed
    cfg = ScenarioConfig.from_json(raw)
    metrics = run_scenario(cfg, store_dir=args.store)
    _write(metrics.to_json() + "\n", args.out)
    return 0


def cmd_audit_k(args) -> int:
    layout = StoreLayout(args.store)
    quasi = tuple(q.strip() for q in args.quasi.split(",") if q.strip())
    records = _records(layout, _services(layout, args.service))
    report = k_report(records, quasi)
    _write(report.to_csv(), args.out)
    if args.threshold is not None and report.k_min < args.threshold:
        print(f"k_min {report.k_min} is below threshold {args.threshold}", file=sys.stderr)
        return EXIT_REFUSED
    return 0


def cmd_export_stats(args) -> int:
    layout = StoreLayout(args.store)
    records = _records(layout, _services(layout, args.service))
    period = (parse_ts(args.from_ts) if args.from_ts is not None else float("-inf"),
              parse_ts(args.to_ts) if args.to_ts is not None else float("inf"))
    try:
        text = export_stats_csv(records, period, args.k_threshold)
    except KAnonymityRefused as exc:
        print(f"export refused: k_min {exc.report.k_min} < {exc.threshold}", file=sys.stderr)
        sys.stderr.write(exc.report.to_csv())
        return EXIT_REFUSED
    _write(text, args.out)
    return 0


def cmd_sweep_retention(args) -> int:
    layout = StoreLayout(args.store)
    routes = EncryptedStore(layout.kv("routes.sqlite"), layout.keys())
    removed = retention_sweep(routes, parse_ts(args.now), RetentionConfig(args.max_age_days))
    print(json.dumps({"removed": removed, "remaining": len(routes)}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quickin", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario and write metrics JSON")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="metrics.json")
    s.add_argument("--store", help="keep durable stores here (default: in memory)")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("audit-k", help="k-anonymity report over completed-session stores")
    a.add_argument("--store", default=DEFAULT_STORE)
    a.add_argument("--quasi", default="age_range", help="comma-separated quasi-identifier fields")
    a.add_argument("--service")
    a.add_argument("--threshold", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_audit_k)

    e = sub.add_parser("export-stats", help="per-day, per-age-range ride counts as CSV")
    e.add_argument("--store", default=DEFAULT_STORE)
    e.add_argument("--service", required=True)
    e.add_argument("--from", dest="from_ts")
    e.add_argument("--to", dest="to_ts")
    e.add_argument("--k-threshold", type=int, default=5)
    e.add_argument("--out")
    e.set_defaults(func=cmd_export_stats)

    r = sub.add_parser("sweep-retention", help="delete route records past the retention age")
    r.add_argument("--store", default=DEFAULT_STORE)
    r.add_argument("--now", required=True)
    r.add_argument("--max-age-days", type=float, default=30.0)
    r.set_defaults(func=cmd_sweep_retention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except EmptyReportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (QuickinError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
