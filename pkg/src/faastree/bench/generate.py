"""Drive load against a node and record one row per call."""

from __future__ import annotations

import asyncio
import csv
import logging
import os
from dataclasses import dataclass
from typing import Any, Iterable

from faastree.bench.profile import ClosedLoop, LoadProfile, Phase, arrival_schedule
from faastree.clock import epoch_ms
from faastree.errors import TargetUnreachable
from faastree.protocol import CallRequest, CallResponse, ErrorCode, new_call_id
from faastree.transport import connect

log = logging.getLogger(__name__)

RESULTS_HEADER = (
    "call_id",
    "function",
    "sched_t_ms",
    "start_t_ms",
    "end_t_ms",
    "outcome",
    "code",
    "cold_start",
    "queue_wait_ms",
    "exec_ms",
    "worker_id",
)


@dataclass(frozen=True)
class ResultRow:
    call_id: str
    function: str
    sched_t_ms: float
    start_t_ms: float
    end_t_ms: float
    outcome: str  # "ok" | "err"
    code: str  # empty when ok
    cold_start: bool
    queue_wait_ms: int
    exec_ms: int
    worker_id: str
    payload_bytes: int = 0  # kept in memory only

    @property
    def ok(self) -> bool:
        return self.outcome == "ok"

    @property
    def latency_ms(self) -> float:
        return self.end_t_ms - self.start_t_ms


def _fmt(value: float) -> str:
    return f"{value:.3f}"


def write_results(path: str | os.PathLike, rows: Iterable[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r.call_id,
                    r.function,
                    _fmt(r.sched_t_ms),
                    _fmt(r.start_t_ms),
                    _fmt(r.end_t_ms),
                    r.outcome,
                    r.code,
                    "true" if r.cold_start else "false",
                    r.queue_wait_ms,
                    r.exec_ms,
                    r.worker_id,
                ]
            )


def read_results(path: str | os.PathLike) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is not None and tuple(reader.fieldnames) != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected results header {reader.fieldnames}")
        return [
            ResultRow(
                call_id=row["call_id"],
                function=row["function"],
                sched_t_ms=float(row["sched_t_ms"]),
                start_t_ms=float(row["start_t_ms"]),
                end_t_ms=float(row["end_t_ms"]),
                outcome=row["outcome"],
                code=row["code"],
                cold_start=row["cold_start"] == "true",
                queue_wait_ms=int(row["queue_wait_ms"]),
                exec_ms=int(row["exec_ms"]),
                worker_id=row["worker_id"],
            )
            for row in reader
        ]


def payload_of(size: int) -> bytes:
    return bytes(i % 251 for i in range(size))


class _Runner:
    def __init__(self, node: Any, deadline_ms: int) -> None:
        self.node = node
        self.deadline_ms = deadline_ms
        self.rows: list[ResultRow] = []

    async def one(self, phase: Phase, payload: bytes, sched: float) -> None:
        req = CallRequest(new_call_id(), phase.function, payload, self.deadline_ms)
        start = epoch_ms()
        try:
            resp = await self.node.call(req)
        except Exception as exc:  # a misbehaving target must not abort the run
            log.warning("call %s raised %r", req.call_id, exc)
            resp = CallResponse.error(req.call_id, ErrorCode.TRANSPORT_ERROR, repr(exc))
        end = epoch_ms()
        code = resp.code
        self.rows.append(
            ResultRow(
                call_id=req.call_id,
                function=phase.function,
                sched_t_ms=sched,
                start_t_ms=start,
                end_t_ms=end,
                outcome="ok" if code is None else "err",
                code="" if code is None else code.value,
                cold_start=resp.cold_start,
                queue_wait_ms=resp.queue_wait_ms,
                exec_ms=resp.exec_ms,
                worker_id=resp.worker_id,
                payload_bytes=len(payload),
            )
        )

    async def phase(self, phase: Phase) -> None:
        payload = payload_of(phase.payload_bytes)
        pattern = phase.pattern
        if isinstance(pattern, ClosedLoop):

            async def loop() -> None:
                for _ in range(pattern.calls_per_worker):
                    await self.one(phase, payload, epoch_ms())

            await asyncio.gather(*(loop() for _ in range(pattern.workers)))
            return

        loop = asyncio.get_running_loop()
        t0 = epoch_ms()
        mono0 = loop.time()
        tasks = []
        for offset in arrival_schedule(phase):
            delay = mono0 + offset / 1000.0 - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            # Fire and forget: open-loop arrivals never wait for responses.
            tasks.append(asyncio.ensure_future(self.one(phase, payload, t0 + offset)))
        await asyncio.gather(*tasks)


async def generate(target: Any, profile: LoadProfile, out: str | os.PathLike | None = None) -> list[ResultRow]:
    """Run every phase of ``profile`` in order against ``target``.

    Per-call failures become rows; only an unreachable target aborts.
    """
    node = connect(target)
    probe = getattr(node, "probe", None)
    if probe is not None:
        await probe()
    elif getattr(node, "_closed", False):
        raise TargetUnreachable(f"{node!r} is not serving")
    runner = _Runner(node, profile.deadline_ms)
    for phase in profile.phases:
        await runner.phase(phase)
    if out is not None:
        write_results(out, runner.rows)
    return runner.rows
