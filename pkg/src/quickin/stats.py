"""Dashboard aggregates. Inputs are anonymized session records only."""
from __future__ import annotations

import csv
import io
from collections import Counter
from typing import Iterable, Optional, Sequence

from .domain import utc_date
from .privacy import AGE_RANGE_LABELS, AnonymizedSessionRecord, k_report, require_k


def in_period(records: Iterable[AnonymizedSessionRecord], period: Optional[tuple]) -> list:
    if period is None:
        return list(records)
    start, end = period
    return [r for r in records if start <= r.start_ts < end]


def _age_order(label: str) -> int:
    return AGE_RANGE_LABELS.index(label) if label in AGE_RANGE_LABELS else len(AGE_RANGE_LABELS)


def rides_by_age_range(records: Iterable[AnonymizedSessionRecord]) -> dict:
    counts = Counter(r.age_range for r in records)
    return {label: counts[label] for label in sorted(counts, key=_age_order)}


def service_stats(records: Sequence[AnonymizedSessionRecord], period: Optional[tuple] = None) -> dict:
    rows = in_period(records, period)
    by_day = Counter(utc_date(r.start_ts).isoformat() for r in rows)
    by_gender = Counter(r.gender for r in rows)
    minutes = [(r.end_ts - r.start_ts) / 60.0 for r in rows]
    return {
        "rides": len(rows),
        "by_age_range": rides_by_age_range(rows),
        "by_day": dict(sorted(by_day.items())),
        "by_gender": dict(sorted(by_gender.items())),
        "mean_ride_minutes": round(sum(minutes) / len(minutes), 2) if minutes else None,
    }


def export_stats_csv(records: Sequence[AnonymizedSessionRecord], period: Optional[tuple] = None,
                     k_threshold: int = 5, quasi_identifier: Sequence[str] = ("age_range",)) -> str:
    """Per-day, per-age-range ride counts plus k summary rows.

    Raises KAnonymityRefused when the smallest group is below ``k_threshold``.
    An empty period yields the header only.
    """
    rows = in_period(records, period)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["day", "age_range", "count"])
    if not rows:
        return buf.getvalue()
    report = require_k(k_report(rows, quasi_identifier), k_threshold)
    counts = Counter((utc_date(r.start_ts).isoformat(), r.age_range) for r in rows)
    for (day, age), n in sorted(counts.items(), key=lambda kv: (kv[0][0], _age_order(kv[0][1]))):
        w.writerow([day, age, n])
    w.writerow(["summary", "k_min", report.k_min])
    w.writerow(["summary", "k_avg", report.k_avg_rounded])
    w.writerow(["summary", "k_max", report.k_max])
    return buf.getvalue()
