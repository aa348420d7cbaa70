"""Trace records and their CSV form."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable

TRACE_HEADER = (
    "t_ms",
    "function",
    "payload_bytes",
    "inflight_at_admit",
    "queue_wait_ms",
    "exec_ms",
    "cold_start",
    "success",
    "utilization",
)


@dataclass(frozen=True)
class TraceRecord:
    t_ms: float  # epoch ms at admission
    function: str
    payload_bytes: int
    inflight_at_admit: int
    queue_wait_ms: int
    exec_ms: int
    cold_start: bool
    success: bool
    utilization: float

    @property
    def latency_ms(self) -> int:
        return self.queue_wait_ms + self.exec_ms

    @property
    def arrival_ms(self) -> float:
        return self.t_ms - self.queue_wait_ms


def _bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _fmt_ms(value: float) -> str:
    return f"{value:.3f}".rstrip("0").rstrip(".")


def write_trace(path: str | os.PathLike, records: Iterable[TraceRecord]) -> int:
    count = 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in records:
            writer.writerow(
                [
                    _fmt_ms(r.t_ms),
                    r.function,
                    r.payload_bytes,
                    r.inflight_at_admit,
                    r.queue_wait_ms,
                    r.exec_ms,
                    "true" if r.cold_start else "false",
                    "true" if r.success else "false",
                    f"{r.utilization:.4f}",
                ]
            )
            count += 1
    return count


def read_trace(path: str | os.PathLike) -> list[TraceRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != TRACE_HEADER:
            raise ValueError(f"{path}: unexpected trace header {header}")
        return [
            TraceRecord(
                t_ms=float(row[0]),
                function=row[1],
                payload_bytes=int(row[2]),
                inflight_at_admit=int(row[3]),
                queue_wait_ms=int(row[4]),
                exec_ms=int(row[5]),
                cold_start=_bool(row[6]),
                success=_bool(row[7]),
                utilization=float(row[8]),
            )
            for row in reader
            if row
        ]
