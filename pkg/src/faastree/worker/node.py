"""The worker node: instance lifecycle, admission, accounting."""

from __future__ import annotations

import asyncio
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping

from faastree.clock import epoch_ms
from faastree.errors import (
    DeadlineExceeded,
    FaasError,
    FunctionError,
    InstanceStartFailed,
    NotFound,
    TransportError,
)
from faastree.protocol import (
    CallRequest,
    CallResponse,
    Err,
    ErrorCode,
    FunctionConfig,
    InstanceInfo,
    Ok,
    StopRequest,
    StopResponse,
    Unlimited,
    WorkerSnapshot,
)
from faastree.registry import CachedConfigs, CachedImages
from faastree.worker.admission import (
    MAX_INSTANCES_PER_FUNCTION,
    QUEUE_CAP,
    Admit,
    Reject,
    Scaler,
    ScaleUp,
    StartNew,
    admit,
)
from faastree.worker.runtime import InvokeContext, Runtime

log = logging.getLogger(__name__)

DRAIN_TIMEOUT_MS = 5000
REAP_INTERVAL_MAX_MS = 250
KILL_GRACE_S = 0.1


@dataclass(eq=False)
class Instance:
    instance_id: str
    function: str
    config: FunctionConfig
    created_at_ms: float
    last_finished_at_ms: float
    status: str = "starting"  # starting | idle | busy | stopping
    in_flight: int = 0
    handle: Any = None
    ready: asyncio.Future = field(default_factory=lambda: asyncio.get_running_loop().create_future())
    drained: asyncio.Event = field(default_factory=asyncio.Event)
    stop_task: asyncio.Task | None = None

    def settle(self) -> None:
        if self.status in ("idle", "busy"):
            self.status = "busy" if self.in_flight else "idle"


@dataclass(eq=False)
class _Function:
    name: str
    instances: dict[str, Instance] = field(default_factory=dict)
    queue: deque = field(default_factory=deque)
    ids: Iterator[int] = field(default_factory=itertools.count)
    scaler: Scaler | None = None
    scaler_task: asyncio.Task | None = None

    def live(self) -> list[Instance]:
        return [i for i in self.instances.values() if i.status != "stopping"]


def reap_idle(instances: Iterable[Instance], configs: Mapping[str, FunctionConfig], now_ms: float) -> list[Instance]:
    """Instances that have sat idle longer than their function's timeout."""
    expired = []
    for inst in instances:
        if inst.status != "idle" or inst.in_flight:
            continue
        cfg = configs.get(inst.function, inst.config)
        if now_ms - inst.last_finished_at_ms > cfg.idle_timeout_ms:
            expired.append(inst)
    return expired


class Worker:
    """Starts instances on demand and runs calls on them.

    All table mutations happen on the event loop thread between awaits, so
    admission decisions and in-flight transitions are atomic with respect to
    one another. Invocations themselves run outside that section.
    """

    def __init__(
        self,
        worker_id: str,
        configs: Any,
        runtime: Runtime,
        images: Any = None,
        *,
        max_instances: int = MAX_INSTANCES_PER_FUNCTION,
        queue_cap: int = QUEUE_CAP,
        drain_timeout_ms: int = DRAIN_TIMEOUT_MS,
        scale_down: bool = True,
        config_ttl_s: float = 10.0,
    ) -> None:
        self.worker_id = worker_id
        self.configs = CachedConfigs(configs, ttl_s=config_ttl_s)
        self.images = CachedImages(images) if images is not None else None
        self.runtime = runtime
        self.max_instances = max_instances
        self.queue_cap = queue_cap
        self.drain_timeout_ms = drain_timeout_ms
        self.scale_down = scale_down
        self.admitted = 0
        self.completed = 0
        self.failed = 0
        self._functions: dict[str, _Function] = {}
        self._reaper: asyncio.Task | None = None
        self._calls: set[asyncio.Task] = set()
        self._background: set[asyncio.Task] = set()
        self._closed = False
        self._killed = False

    def __repr__(self) -> str:
        return f"Worker({self.worker_id!r})"

    # -- lifecycle -------------------------------------------------------------

    async def start(self) -> Worker:
        if self._reaper is None:
            self._reaper = asyncio.create_task(self._reap_loop())
        return self

    async def close(self, drain: bool = True) -> None:
        """Stop accepting calls and tear every instance down."""
        self._closed = True
        if self._reaper is not None:
            self._reaper.cancel()
        for fs in self._functions.values():
            if fs.scaler_task is not None:
                fs.scaler_task.cancel()
        drain_ms = self.drain_timeout_ms if drain else 0
        stops = [
            self._stop_instance(fs, inst, drain_ms)
            for fs in self._functions.values()
            for inst in list(fs.instances.values())
        ]
        await asyncio.gather(*stops, return_exceptions=True)
        tasks = [t for t in self._background | ({self._reaper} if self._reaper else set())]
        await asyncio.gather(*tasks, return_exceptions=True)

    async def kill(self) -> None:
        """Simulate a crash: in-flight callers see TRANSPORT_ERROR."""
        self._killed = True
        for task in list(self._calls):
            task.cancel()
        await self.close(drain=False)

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.create_task(coro)
        self._background.add(task)
        task.add_done_callback(self._background.discard)
        return task

    # -- calls -----------------------------------------------------------------

    async def call(self, req: CallRequest) -> CallResponse:
        if self._closed:
            return CallResponse.error(req.call_id, ErrorCode.TRANSPORT_ERROR, "worker is down", self.worker_id)
        inner = asyncio.ensure_future(self._handle(req, epoch_ms()))
        self._calls.add(inner)
        inner.add_done_callback(self._calls.discard)
        try:
            return await inner
        except asyncio.CancelledError:
            if self._killed:
                return CallResponse.error(req.call_id, ErrorCode.TRANSPORT_ERROR, "worker died", self.worker_id)
            raise

    def _function(self, cfg: FunctionConfig) -> _Function:
        fs = self._functions.get(cfg.function)
        if fs is None:
            fs = self._functions[cfg.function] = _Function(cfg.function)
        if isinstance(cfg.concurrency, Unlimited) and fs.scaler_task is None and not self._closed:
            fs.scaler = Scaler(scale_down=self.scale_down)
            fs.scaler_task = asyncio.create_task(self._scale_loop(fs))
        return fs

    def _reply(self, req: CallRequest, outcome, arrival: float, admitted: float, cold: bool) -> CallResponse:
        now = epoch_ms()
        return CallResponse(
            call_id=req.call_id,
            outcome=outcome,
            cold_start=cold,
            queue_wait_ms=max(0, round(admitted - arrival)),
            exec_ms=max(0, round(now - admitted)),
            worker_id=self.worker_id,
        )

    async def _handle(self, req: CallRequest, arrival: float) -> CallResponse:
        try:
            cfg = self.configs.get_config(req.function)
        except NotFound as exc:
            return CallResponse.error(req.call_id, ErrorCode.NOT_FOUND, str(exc), self.worker_id)
        fs = self._function(cfg)
        deadline = arrival + req.deadline_ms
        requeue = False

        while True:
            decision = admit(req, list(fs.instances.values()), cfg, len(fs.queue), self.max_instances, self.queue_cap)
            if isinstance(decision, Admit):
                inst = fs.instances[decision.instance_id]
                break
            if isinstance(decision, StartNew):
                inst = self._new_instance(fs, cfg)
                break
            if isinstance(decision, Reject):
                return self._reply(req, Err(ErrorCode.OVERLOADED, "queue full"), arrival, epoch_ms(), False)
            waiter = asyncio.get_running_loop().create_future()
            if requeue:
                fs.queue.appendleft(waiter)
            else:
                fs.queue.append(waiter)
            requeue = True
            try:
                await asyncio.wait_for(waiter, max(0.0, deadline - epoch_ms()) / 1000.0)
            except asyncio.TimeoutError:
                if waiter in fs.queue:
                    fs.queue.remove(waiter)
                now = epoch_ms()
                return self._reply(req, Err(ErrorCode.DEADLINE_EXCEEDED, "deadline passed while queued"), arrival, now, False)

        admitted = epoch_ms()
        ctx = InvokeContext(
            call_id=req.call_id,
            function=req.function,
            inflight=inst.in_flight,
            utilization=self.utilization(),
            cold=inst.created_at_ms >= arrival,
        )
        inst.in_flight += 1
        inst.settle()
        self.admitted += 1
        ok = False
        try:
            outcome = await self._run(req, inst, cfg, deadline, ctx)
            ok = isinstance(outcome, Ok)
        finally:
            self._release(fs, inst, ok)
        return self._reply(req, outcome, arrival, admitted, ctx.cold)

    async def _run(self, req: CallRequest, inst: Instance, cfg: FunctionConfig, deadline: float, ctx: InvokeContext):
        try:
            if not inst.ready.done():
                remaining = (deadline - epoch_ms()) / 1000.0
                await asyncio.wait_for(asyncio.shield(inst.ready), max(0.0, remaining))
            inst.ready.result()
            timeout = min(deadline - epoch_ms(), cfg.exec_deadline_ms) / 1000.0
            if timeout <= 0:
                raise DeadlineExceeded("no budget left")
            payload = await asyncio.wait_for(
                self.runtime.invoke(inst.handle, req.payload, timeout, ctx), timeout + KILL_GRACE_S
            )
            return Ok(payload)
        except InstanceStartFailed as exc:
            return Err(ErrorCode.INSTANCE_START_FAILED, str(exc))
        except (DeadlineExceeded, asyncio.TimeoutError) as exc:
            return Err(ErrorCode.DEADLINE_EXCEEDED, str(exc) or "deadline exceeded")
        except NotFound as exc:
            return Err(ErrorCode.NOT_FOUND, str(exc))
        except FunctionError as exc:
            return Err(ErrorCode.FUNCTION_ERROR, str(exc))
        except FaasError as exc:
            return Err(ErrorCode.FUNCTION_ERROR, f"{exc.code}: {exc}")

    def _release(self, fs: _Function, inst: Instance, ok: bool) -> None:
        inst.in_flight -= 1
        if ok:
            self.completed += 1
        else:
            self.failed += 1
        inst.last_finished_at_ms = epoch_ms()
        inst.settle()
        if inst.in_flight == 0:
            inst.drained.set()
        if inst.handle is not None and not self.runtime.alive(inst.handle) and inst.status != "stopping":
            self._stop_instance(fs, inst, 0)
        self._wake(fs)

    def _wake(self, fs: _Function) -> None:
        while fs.queue:
            waiter = fs.queue.popleft()
            if not waiter.done():
                waiter.set_result(None)
                return

    # -- instance lifecycle ----------------------------------------------------

    def _new_instance(self, fs: _Function, cfg: FunctionConfig) -> Instance:
        now = epoch_ms()
        inst = Instance(
            instance_id=f"{cfg.function}-{next(fs.ids):06d}",
            function=cfg.function,
            config=cfg,
            created_at_ms=now,
            last_finished_at_ms=now,
        )
        inst.ready.add_done_callback(lambda f: f.cancelled() or f.exception())
        fs.instances[inst.instance_id] = inst
        self._spawn(self._boot(fs, inst))
        return inst

    async def _boot(self, fs: _Function, inst: Instance) -> None:
        try:
            image = None
            if self.runtime.needs_image:
                if self.images is None:
                    raise InstanceStartFailed("worker has no image store")
                image = self.images.get_image(inst.config.image_digest)
            handle = await self.runtime.start_instance(inst.config, image, inst.instance_id)
        except Exception as exc:
            log.warning("%s: starting %s failed: %s", self.worker_id, inst.instance_id, exc)
            fs.instances.pop(inst.instance_id, None)
            err = exc if isinstance(exc, InstanceStartFailed) else InstanceStartFailed(f"{type(exc).__name__}: {exc}")
            inst.ready.set_exception(err)
            self._wake(fs)
            return
        inst.handle = handle
        inst.last_finished_at_ms = epoch_ms()
        if inst.status == "starting":
            inst.status = "idle"
            inst.settle()
        inst.ready.set_result(None)

    def _stop_instance(self, fs: _Function, inst: Instance, drain_ms: float) -> asyncio.Task:
        if inst.stop_task is None:
            inst.status = "stopping"
            inst.stop_task = self._spawn(self._finish_stop(fs, inst, drain_ms))
        return inst.stop_task

    async def _finish_stop(self, fs: _Function, inst: Instance, drain_ms: float) -> None:
        try:
            await asyncio.shield(inst.ready)
        except Exception:
            fs.instances.pop(inst.instance_id, None)
            return
        if inst.in_flight and drain_ms > 0:
            try:
                await asyncio.wait_for(inst.drained.wait(), drain_ms / 1000.0)
            except asyncio.TimeoutError:
                log.info("%s: drain of %s timed out", self.worker_id, inst.instance_id)
        try:
            await self.runtime.stop_instance(inst.handle)
        except Exception as exc:
            log.warning("%s: stopping %s failed, dropping it: %s", self.worker_id, inst.instance_id, exc)
        fs.instances.pop(inst.instance_id, None)
        self._wake(fs)

    async def stop(self, req: StopRequest) -> StopResponse:
        """Handle a stop command from a leaf."""
        if req.instance_id is not None:
            for fs in self._functions.values():
                inst = fs.instances.get(req.instance_id)
                if inst is not None:
                    self._stop_instance(fs, inst, self.drain_timeout_ms)
                    return StopResponse(self.worker_id)
            return StopResponse(self.worker_id, Err(ErrorCode.NOT_FOUND, f"no instance {req.instance_id!r}"))
        fs = self._functions.get(req.function)
        if fs is not None:
            for inst in list(fs.instances.values()):
                self._stop_instance(fs, inst, self.drain_timeout_ms)
        return StopResponse(self.worker_id)

    # -- background loops ------------------------------------------------------

    def _known_configs(self) -> dict[str, FunctionConfig]:
        configs = {}
        for name, fs in self._functions.items():
            try:
                configs[name] = self.configs.get_config(name)
            except NotFound:
                for inst in fs.instances.values():
                    configs[name] = inst.config
        return configs

    def reap_interval_ms(self) -> float:
        timeouts = [c.idle_timeout_ms for c in self._known_configs().values()]
        return min([REAP_INTERVAL_MAX_MS] + [t / 4 for t in timeouts])

    async def _reap_loop(self) -> None:
        while True:
            await asyncio.sleep(self.reap_interval_ms() / 1000.0)
            self.reap()

    def reap(self) -> list[str]:
        configs = self._known_configs()
        now = epoch_ms()
        stopped = []
        for fs in self._functions.values():
            for inst in reap_idle(list(fs.instances.values()), configs, now):
                self._stop_instance(fs, inst, 0)
                stopped.append(inst.instance_id)
        return stopped

    def _instance_utilization(self, inst: Instance) -> float:
        if inst.handle is None:
            return 0.0
        return self.runtime.utilization(inst.handle, inst.in_flight)

    async def _scale_loop(self, fs: _Function) -> None:
        while True:
            try:
                cfg = self.configs.get_config(fs.name)
            except NotFound:
                return
            mode = cfg.concurrency
            if not isinstance(mode, Unlimited):
                fs.scaler_task = None
                return
            await asyncio.sleep(mode.check_interval_ms / 1000.0)
            for action in fs.scaler.check(fs.live(), cfg, self._instance_utilization):
                if isinstance(action, ScaleUp):
                    if len(fs.live()) < self.max_instances:
                        self._new_instance(fs, cfg)
                else:
                    inst = fs.instances.get(action.instance_id)
                    if inst is not None and inst.in_flight == 0:
                        self._stop_instance(fs, inst, self.drain_timeout_ms)

    # -- state -----------------------------------------------------------------

    def utilization(self) -> float:
        ready = [i for fs in self._functions.values() for i in fs.live() if i.handle is not None]
        if not ready:
            return 0.0
        return min(1.0, sum(self._instance_utilization(i) for i in ready) / len(ready))

    def instances(self, function: str | None = None) -> list[Instance]:
        return [
            i
            for name, fs in self._functions.items()
            if function is None or name == function
            for i in fs.instances.values()
        ]

    def snapshot(self) -> WorkerSnapshot:
        infos = []
        for inst in self.instances():
            if inst.status == "stopping":
                if not inst.in_flight:
                    continue
                status = "busy"
            else:
                status = inst.status
            infos.append(
                InstanceInfo(inst.instance_id, inst.function, status, inst.in_flight, int(inst.created_at_ms))
            )
        return WorkerSnapshot(self.worker_id, int(epoch_ms()), tuple(infos), self.utilization())

    async def state(self) -> WorkerSnapshot:
        if self._closed:
            raise TransportError(f"worker {self.worker_id} is down")
        return self.snapshot()
