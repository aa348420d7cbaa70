"""Replay a trace against an emulated worker and compare the two."""

from __future__ import annotations

import asyncio
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

from scipy.stats import ks_2samp

from faastree.bench.report import nearest_rank
from faastree.clock import run_virtual
from faastree.emulator.model import WorkerModel
from faastree.emulator.runtime import REFERENCE_CONCURRENCY, EmulatedRuntime
from faastree.emulator.trace import TraceRecord
from faastree.errors import NotFound
from faastree.protocol import CallRequest, CallResponse, FunctionConfig, Single
from faastree.registry import StaticConfigs
from faastree.worker.node import Worker

PLACEHOLDER_DIGEST = "0" * 64


@dataclass
class FunctionFidelity:
    n_trace: int
    n_emulated: int
    median_trace_ms: float
    median_emulated_ms: float
    median_rel_error: float
    p95_trace_ms: float
    p95_emulated_ms: float
    p95_rel_error: float
    failure_rate_trace: float
    failure_rate_emulated: float
    failure_rate_abs_error: float
    ks_statistic: float


@dataclass
class FidelityReport:
    functions: dict[str, FunctionFidelity] = field(default_factory=dict)
    uncovered: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"functions": {k: asdict(v) for k, v in self.functions.items()}, "uncovered": self.uncovered}


def _rel(emulated: float, observed: float) -> float:
    if observed == 0:
        return abs(emulated)
    return abs(emulated - observed) / observed


class _Fallback:
    """Config source that invents a limit-one config for unknown functions."""

    def __init__(self, configs: Any) -> None:
        self.configs = configs

    def get_config(self, function: str) -> FunctionConfig:
        if self.configs is not None:
            try:
                return self.configs.get_config(function)
            except NotFound:
                pass
        return FunctionConfig(function, PLACEHOLDER_DIGEST, concurrency=Single(), idle_timeout_ms=60_000)


async def replay(
    model: WorkerModel,
    trace: Sequence[TraceRecord],
    seed: int | str = 0,
    configs: Any = None,
    reference_concurrency: int = REFERENCE_CONCURRENCY,
) -> list[tuple[TraceRecord, CallResponse]]:
    """Issue every traced call at its original relative arrival time."""
    runtime = EmulatedRuntime(model, seed=seed, reference_concurrency=reference_concurrency)
    worker = await Worker("emulated", _Fallback(configs), runtime).start()
    loop = asyncio.get_running_loop()
    order = sorted(range(len(trace)), key=lambda i: (trace[i].arrival_ms, i))
    t0 = trace[order[0]].arrival_ms
    start = loop.time()
    results: list[CallResponse | None] = [None] * len(trace)

    async def fire(i: int) -> None:
        rec = trace[i]
        req = CallRequest(f"{i:032x}", rec.function, bytes(rec.payload_bytes), 3_600_000)
        results[i] = await worker.call(req)

    tasks = []
    for i in order:
        delay = start + (trace[i].arrival_ms - t0) / 1000.0 - loop.time()
        if delay > 0:
            await asyncio.sleep(delay)
        tasks.append(asyncio.ensure_future(fire(i)))
    await asyncio.gather(*tasks)
    await worker.close(drain=False)
    return list(zip(trace, results))


def evaluate_model(
    model: WorkerModel,
    trace: Sequence[TraceRecord],
    seed: int | str = 0,
    configs: Any = None,
    reference_concurrency: int = REFERENCE_CONCURRENCY,
) -> FidelityReport:
    """Fidelity of ``model`` against ``trace``.

    The replay runs on a virtual clock, so the report is a pure function of
    (model, trace, seed, configs).
    """
    trace = list(trace)
    if not trace:
        raise ValueError("cannot evaluate against an empty trace")
    pairs = run_virtual(replay(model, trace, seed, configs, reference_concurrency))
    report = FidelityReport()
    for name in sorted({r.function for r in trace}):
        if name not in model.functions:
            report.uncovered.append(name)
            continue
        mine = [(rec, resp) for rec, resp in pairs if rec.function == name]
        observed = sorted(float(rec.latency_ms) for rec, _ in mine)
        emulated = sorted(float(resp.queue_wait_ms + resp.exec_ms) for _, resp in mine)
        fail_obs = sum(not rec.success for rec, _ in mine) / len(mine)
        fail_emu = sum(not resp.ok for _, resp in mine) / len(mine)
        med_o, med_e = nearest_rank(observed, 0.5), nearest_rank(emulated, 0.5)
        p95_o, p95_e = nearest_rank(observed, 0.95), nearest_rank(emulated, 0.95)
        report.functions[name] = FunctionFidelity(
            n_trace=len(observed),
            n_emulated=len(emulated),
            median_trace_ms=med_o,
            median_emulated_ms=med_e,
            median_rel_error=_rel(med_e, med_o),
            p95_trace_ms=p95_o,
            p95_emulated_ms=p95_e,
            p95_rel_error=_rel(p95_e, p95_o),
            failure_rate_trace=fail_obs,
            failure_rate_emulated=fail_emu,
            failure_rate_abs_error=abs(fail_emu - fail_obs),
            ks_statistic=float(ks_2samp(observed, emulated).statistic),
        )
    return report
