"""Record a trace from a real worker under artificial load."""

from __future__ import annotations

import asyncio
import bisect
import logging
import os
from pathlib import Path
from typing import Any

from faastree.bench.generate import ResultRow, generate
from faastree.bench.profile import LoadProfile
from faastree.clock import epoch_ms
from faastree.emulator.trace import TraceRecord, write_trace
from faastree.errors import NotFound, TargetUnreachable, TransportError
from faastree.protocol import WorkerSnapshot
from faastree.transport import connect
from faastree.worker.admission import Admit, admit

log = logging.getLogger(__name__)

POLL_INTERVAL_S = 0.1


def _attribute(row: ResultRow, snap: WorkerSnapshot | None, configs: Any) -> tuple[int, float]:
    """Estimate (instance in-flight, worker utilization) when ``row`` was admitted.

    The admission rule is replayed on the latest snapshot to guess which
    instance took the call.
    """
    if snap is None:
        return 0, 0.0
    candidates = snap.for_function(row.function)
    inflight = 0
    cfg = None
    if configs is not None:
        try:
            cfg = configs.get_config(row.function)
        except NotFound:
            cfg = None
    if cfg is not None:
        decision = admit(None, candidates, cfg, queue_len=0)
        if isinstance(decision, Admit):
            inflight = next(i.in_flight for i in candidates if i.instance_id == decision.instance_id)
    elif candidates:
        inflight = min(i.in_flight for i in candidates)
    return inflight, snap.utilization


def to_trace(rows: list[ResultRow], snapshots: list[tuple[float, WorkerSnapshot]], configs: Any = None) -> list[TraceRecord]:
    times = [t for t, _ in snapshots]
    records = []
    for row in rows:
        admitted = row.start_t_ms + row.queue_wait_ms
        idx = bisect.bisect_right(times, row.start_t_ms) - 1
        snap = snapshots[idx][1] if idx >= 0 else None
        inflight, util = _attribute(row, snap, configs)
        records.append(
            TraceRecord(
                t_ms=admitted,
                function=row.function,
                payload_bytes=row.payload_bytes,
                inflight_at_admit=inflight,
                queue_wait_ms=row.queue_wait_ms,
                exec_ms=row.exec_ms,
                cold_start=row.cold_start,
                success=row.ok,
                utilization=util,
            )
        )
    return records


def invalid_marker(trace_path: str | os.PathLike) -> Path:
    return Path(f"{trace_path}.invalid")


async def record_trace(
    worker: Any,
    profile: LoadProfile,
    trace_path: str | os.PathLike,
    configs: Any = None,
    poll_interval_s: float = POLL_INTERVAL_S,
) -> list[TraceRecord]:
    """Drive ``profile`` against ``worker`` and write one trace row per call.

    The worker's state is polled alongside the load to attribute in-flight
    counts and utilization. If the worker stops answering, whatever was
    collected is written and flagged with a ``.invalid`` marker file.
    """
    node = connect(worker)
    marker = invalid_marker(trace_path)
    marker.unlink(missing_ok=True)
    snapshots: list[tuple[float, WorkerSnapshot]] = []
    try:
        snapshots.append((epoch_ms(), await node.state()))
    except (TransportError, OSError) as exc:
        write_trace(trace_path, [])
        marker.write_text(f"worker unreachable: {exc}\n")
        raise TargetUnreachable(f"worker unreachable: {exc}") from None

    lost: list[str] = []

    async def poll() -> None:
        while True:
            await asyncio.sleep(poll_interval_s)
            try:
                snapshots.append((epoch_ms(), await node.state()))
            except (TransportError, OSError) as exc:
                lost.append(str(exc))
                return

    poller = asyncio.create_task(poll())
    try:
        rows = await generate(node, profile)
    finally:
        poller.cancel()
        await asyncio.gather(poller, return_exceptions=True)
    if not lost:
        # Failed calls can drain faster than the poll interval, so check once more.
        try:
            snapshots.append((epoch_ms(), await node.state()))
        except (TransportError, OSError) as exc:
            lost.append(str(exc))

    records = to_trace(rows, snapshots, configs)
    write_trace(trace_path, records)
    if lost:
        marker.write_text(f"worker became unreachable: {lost[0]}\n")
        raise TargetUnreachable(f"worker became unreachable during recording: {lost[0]}")
    return records
