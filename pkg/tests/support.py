"""Shared helpers for the test-suite."""

from __future__ import annotations

import asyncio
from collections import defaultdict
from typing import Any

from faastree.emulator.model import WorkerModel
from faastree.emulator.runtime import EmulatedRuntime
from faastree.protocol import FunctionConfig, HardLimit
from faastree.registry import StaticConfigs
from faastree.worker.runtime import InvokeContext, Runtime
from faastree.worker.node import Worker

DIGEST = "a" * 64


def config(function: str = "f", concurrency: Any = None, **kw: Any) -> FunctionConfig:
    return FunctionConfig(function, DIGEST, concurrency=concurrency or HardLimit(1), **kw)


class InstrumentedRuntime(Runtime):
    """Sleeps for ``work_ms`` per call and records overlap per instance."""

    needs_image = False

    def __init__(self, work_ms: float = 20.0, start_ms: float = 0.0, reference: int = 10) -> None:
        self.work_ms = work_ms
        self.start_ms = start_ms
        self.reference = reference
        self.active: dict[str, int] = defaultdict(int)
        self.peak: dict[str, int] = defaultdict(int)
        self.calls: dict[str, int] = defaultdict(int)
        self.started: list[str] = []
        self.stopped: list[str] = []
        self.fail_next = 0

    async def start_instance(self, config: FunctionConfig, image: bytes | None, instance_id: str) -> str:
        if self.start_ms:
            await asyncio.sleep(self.start_ms / 1000)
        self.started.append(instance_id)
        return instance_id

    async def invoke(self, handle: str, payload: bytes, timeout_s: float, ctx: InvokeContext) -> bytes:
        self.active[handle] += 1
        self.calls[handle] += 1
        self.peak[handle] = max(self.peak[handle], self.active[handle])
        try:
            await asyncio.sleep(self.work_ms / 1000)
        finally:
            self.active[handle] -= 1
        return payload

    async def stop_instance(self, handle: str) -> None:
        self.stopped.append(handle)

    def utilization(self, handle: str, in_flight: int) -> float:
        return min(1.0, in_flight / self.reference)


def emulated_worker(
    worker_id: str,
    configs: Any,
    latency_ms: float | dict[str, float] = 10.0,
    seed: Any = 0,
    **kw: Any,
) -> Worker:
    table = latency_ms if isinstance(latency_ms, dict) else {c: latency_ms for c in configs.functions()}
    runtime = EmulatedRuntime(WorkerModel.constant(table), seed=f"{seed}/{worker_id}")
    return Worker(worker_id, configs, runtime, **kw)


def static(*configs: FunctionConfig) -> StaticConfigs:
    return StaticConfigs(list(configs))
