"""Summaries of a results CSV."""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from faastree.bench.generate import ResultRow, read_results

PERCENTILES = (("p50", "0.5"), ("p90", "0.9"), ("p95", "0.95"), ("p99", "0.99"))


def nearest_rank(sorted_values: Sequence[float], p: float | str) -> float:
    """Value at 1-based rank ceil(p * n) of an ascending sample."""
    if not sorted_values:
        return 0.0
    rank = math.ceil(Fraction(str(p)) * len(sorted_values))
    return sorted_values[min(max(rank, 1), len(sorted_values)) - 1]


@dataclass
class Stats:
    count: int = 0
    success_count: int = 0
    errors: dict[str, int] = field(default_factory=dict)
    cold_start_count: int = 0
    p50: float = 0.0
    p90: float = 0.0
    p95: float = 0.0
    p99: float = 0.0
    max: float = 0.0
    rate_per_s: float = 0.0

    @classmethod
    def of(cls, rows: Sequence[ResultRow]) -> Stats:
        if not rows:
            return cls()
        lat = sorted(r.latency_ms for r in rows)
        span_ms = max(r.end_t_ms for r in rows) - min(r.start_t_ms for r in rows)
        return cls(
            count=len(rows),
            success_count=sum(r.ok for r in rows),
            errors=dict(sorted(Counter(r.code for r in rows if not r.ok).items())),
            cold_start_count=sum(r.cold_start for r in rows),
            **{name: nearest_rank(lat, p) for name, p in PERCENTILES},
            max=lat[-1],
            rate_per_s=len(rows) / (span_ms / 1000.0) if span_ms > 0 else 0.0,
        )


@dataclass
class RunReport:
    overall: Stats
    functions: dict[str, Stats]

    def to_dict(self) -> dict:
        return {"overall": asdict(self.overall), "functions": {k: asdict(v) for k, v in self.functions.items()}}


def report(source: str | os.PathLike | Iterable[ResultRow]) -> RunReport:
    rows = read_results(source) if isinstance(source, (str, os.PathLike)) else list(source)
    names = sorted({r.function for r in rows})
    return RunReport(Stats.of(rows), {n: Stats.of([r for r in rows if r.function == n]) for n in names})


def render_table(rep: RunReport) -> str:
    header = ["function", "count", "ok", "errors", "cold", "p50", "p90", "p95", "p99", "max", "rate/s"]
    lines = []
    for name, st in [*rep.functions.items(), ("(all)", rep.overall)]:
        errs = ",".join(f"{k}:{v}" for k, v in st.errors.items()) or "-"
        lines.append(
            [name, str(st.count), str(st.success_count), errs, str(st.cold_start_count)]
            + [f"{v:.1f}" for v in (st.p50, st.p90, st.p95, st.p99, st.max, st.rate_per_s)]
        )
    widths = [max(len(row[i]) for row in [header, *lines]) for i in range(len(header))]

    def fmt(row: list[str]) -> str:
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        return "  ".join(cells)

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule, *(fmt(r) for r in lines)])


def write_summary(rep: RunReport, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        json.dump(rep.to_dict(), fh, indent=2)
        fh.write("\n")
