"""A runtime that fakes function execution from a fitted model."""

from __future__ import annotations

import asyncio
import random
from dataclasses import dataclass, field

from faastree.emulator.model import WorkerModel, emulate_invoke
from faastree.errors import DeadlineExceeded, FunctionError
from faastree.protocol import FunctionConfig
from faastree.worker.runtime import InvokeContext, Runtime

SYNTHETIC_PAYLOAD = bytes(range(64))
REFERENCE_CONCURRENCY = 8


@dataclass(eq=False)
class _EmulatedInstance:
    function: str
    rng: random.Random
    sleepers: set = field(default_factory=set)
    stopped: bool = False


class EmulatedRuntime(Runtime):
    """Sleeps for a model-drawn latency instead of running code.

    Each instance gets its own random stream derived from ``seed`` and the
    instance id, so concurrent calls on other instances never perturb it.
    Utilization is in-flight count over ``reference_concurrency``.
    """

    needs_image = False

    def __init__(
        self,
        model: WorkerModel,
        seed: int | str = 0,
        reference_concurrency: int = REFERENCE_CONCURRENCY,
    ) -> None:
        if reference_concurrency < 1:
            raise ValueError("reference_concurrency must be positive")
        self.model = model
        self.seed = seed
        self.reference_concurrency = reference_concurrency

    async def start_instance(self, config: FunctionConfig, image: bytes | None, instance_id: str) -> _EmulatedInstance:
        return _EmulatedInstance(config.function, random.Random(f"{self.seed}/{instance_id}"))

    async def invoke(self, handle: _EmulatedInstance, payload: bytes, timeout_s: float, ctx: InvokeContext) -> bytes:
        if handle.stopped:
            raise FunctionError("instance stopped")
        latency_ms, success = emulate_invoke(
            self.model, handle.function, len(payload), ctx.inflight, ctx.utilization, ctx.cold, handle.rng
        )
        delay = latency_ms / 1000.0
        sleeper = asyncio.ensure_future(asyncio.sleep(min(delay, timeout_s)))
        handle.sleepers.add(sleeper)
        try:
            # wait() lets a stop (which cancels the sleeper) be told apart
            # from the caller cancelling this invocation.
            await asyncio.wait({sleeper})
        finally:
            sleeper.cancel()
            handle.sleepers.discard(sleeper)
        if sleeper.cancelled():
            raise FunctionError("instance stopped")
        if delay > timeout_s:
            raise DeadlineExceeded(f"emulated latency {latency_ms:.1f} ms over budget")
        if not success:
            raise FunctionError("emulated failure")
        return SYNTHETIC_PAYLOAD

    async def stop_instance(self, handle: _EmulatedInstance) -> None:
        handle.stopped = True
        for sleeper in list(handle.sleepers):
            sleeper.cancel()

    def utilization(self, handle: _EmulatedInstance, in_flight: int) -> float:
        return min(1.0, in_flight / self.reference_concurrency)

    def alive(self, handle: _EmulatedInstance) -> bool:
        return not handle.stopped
