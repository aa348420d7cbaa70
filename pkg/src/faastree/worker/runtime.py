"""Ways of running function instances.

:class:`ProcessRuntime` runs each instance as a subprocess that exchanges
frames on stdin/stdout. The emulated runtime lives in
:mod:`faastree.emulator.runtime`.
"""

from __future__ import annotations

import abc
import asyncio
import hashlib
import logging
import os
import stat
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import psutil

from faastree.errors import DeadlineExceeded, FunctionError, InstanceStartFailed
from faastree.protocol import CallRequest, CallResponse, FunctionConfig, Ok, encode_message
from faastree.transport import read_message

log = logging.getLogger(__name__)

KILL_GRACE_S = 0.1


@dataclass(frozen=True)
class InvokeContext:
    """What the worker knows about a call at admission time."""

    call_id: str
    function: str
    inflight: int = 0  # other requests already running on the instance
    utilization: float = 0.0  # worker-level
    cold: bool = False


class Runtime(abc.ABC):
    needs_image = True

    @abc.abstractmethod
    async def start_instance(self, config: FunctionConfig, image: bytes | None, instance_id: str) -> Any:
        """Start an instance and return an opaque handle."""

    @abc.abstractmethod
    async def invoke(self, handle: Any, payload: bytes, timeout_s: float, ctx: InvokeContext) -> bytes:
        """Run one request; raise FunctionError or DeadlineExceeded on failure."""

    @abc.abstractmethod
    async def stop_instance(self, handle: Any) -> None: ...

    def utilization(self, handle: Any, in_flight: int) -> float:
        return 0.0

    def alive(self, handle: Any) -> bool:
        return True


@dataclass(eq=False)
class _Proc:
    proc: asyncio.subprocess.Process
    config: FunctionConfig
    pending: dict[str, asyncio.Future] = field(default_factory=dict)
    lock: asyncio.Lock = field(default_factory=asyncio.Lock)
    reader: asyncio.Task | None = None
    ps: psutil.Process | None = None
    dead: bool = False


class ProcessRuntime(Runtime):
    """One subprocess per instance; concurrent requests interleave as frames."""

    def __init__(self, work_dir: str | os.PathLike | None = None) -> None:
        self._tmp = None
        if work_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="faastree-images-")
            work_dir = self._tmp.name
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)

    def _materialize(self, image: bytes) -> Path:
        path = self.work_dir / hashlib.sha256(image).hexdigest()
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(image)
            tmp.chmod(tmp.stat().st_mode | stat.S_IXUSR | stat.S_IRUSR)
            os.replace(tmp, path)
        return path

    async def start_instance(self, config: FunctionConfig, image: bytes | None, instance_id: str) -> _Proc:
        if not image:
            raise InstanceStartFailed(f"no image for {config.function}")
        env = dict(
            os.environ,
            FAAS_FUNCTION=config.function,
            FAAS_INSTANCE=instance_id,
            FAAS_MEMORY_MB=str(config.memory_limit_mb),
            FAAS_CPU_MILLIS=str(config.cpu_millis),
        )
        try:
            proc = await asyncio.create_subprocess_exec(
                str(self._materialize(image)),
                stdin=asyncio.subprocess.PIPE,
                stdout=asyncio.subprocess.PIPE,
                env=env,
            )
        except OSError as exc:
            raise InstanceStartFailed(f"cannot exec image for {config.function}: {exc}") from exc
        handle = _Proc(proc, config)
        try:
            handle.ps = psutil.Process(proc.pid)
            handle.ps.cpu_percent(None)
        except psutil.Error:
            handle.ps = None
        handle.reader = asyncio.create_task(self._read_loop(handle))
        return handle

    async def _read_loop(self, handle: _Proc) -> None:
        try:
            while True:
                msg = await read_message(handle.proc.stdout)
                if not isinstance(msg, CallResponse):
                    continue
                fut = handle.pending.pop(msg.call_id, None)
                if fut is not None and not fut.done():
                    fut.set_result(msg)
        except asyncio.IncompleteReadError:
            pass
        except Exception as exc:
            log.warning("instance %s stdout unreadable: %r", handle.config.function, exc)
        finally:
            handle.dead = True
            for fut in handle.pending.values():
                if not fut.done():
                    fut.set_exception(FunctionError("instance exited"))
            handle.pending.clear()

    async def invoke(self, handle: _Proc, payload: bytes, timeout_s: float, ctx: InvokeContext) -> bytes:
        if handle.dead:
            raise FunctionError("instance is not running")
        fut = asyncio.get_running_loop().create_future()
        handle.pending[ctx.call_id] = fut
        req = CallRequest(ctx.call_id, ctx.function, payload, max(1, int(timeout_s * 1000)))
        try:
            async with handle.lock:
                handle.proc.stdin.write(encode_message(req))
                await handle.proc.stdin.drain()
            resp = await asyncio.wait_for(asyncio.shield(fut), timeout_s)
        except asyncio.TimeoutError:
            handle.pending.pop(ctx.call_id, None)
            if not handle.pending:
                # Nothing else is running in there; reclaim it hard.
                await self._kill(handle)
            raise DeadlineExceeded(f"{ctx.function} exceeded {timeout_s * 1000:.0f} ms") from None
        except (ConnectionError, BrokenPipeError) as exc:
            handle.pending.pop(ctx.call_id, None)
            raise FunctionError(f"instance pipe closed: {exc}") from None
        except asyncio.CancelledError:
            handle.pending.pop(ctx.call_id, None)
            raise
        if isinstance(resp.outcome, Ok):
            return resp.outcome.payload
        raise FunctionError(resp.outcome.message or resp.outcome.code.value)

    async def _kill(self, handle: _Proc) -> None:
        handle.dead = True
        if handle.proc.returncode is None:
            try:
                handle.proc.kill()
            except ProcessLookupError:
                pass
        try:
            await asyncio.wait_for(handle.proc.wait(), 1.0)
        except asyncio.TimeoutError:
            log.warning("instance %s did not exit after kill", handle.config.function)
        if handle.reader is not None:
            await asyncio.gather(handle.reader, return_exceptions=True)

    async def stop_instance(self, handle: _Proc) -> None:
        if handle.proc.returncode is None:
            try:
                handle.proc.stdin.close()
                handle.proc.terminate()
            except (ProcessLookupError, OSError):
                pass
            try:
                await asyncio.wait_for(handle.proc.wait(), KILL_GRACE_S * 5)
            except asyncio.TimeoutError:
                pass
        await self._kill(handle)

    def utilization(self, handle: _Proc, in_flight: int) -> float:
        if handle.ps is None or handle.dead:
            return 0.0
        try:
            cores = handle.ps.cpu_percent(None) / 100.0
        except psutil.Error:
            return 0.0
        return min(1.0, cores / (handle.config.cpu_millis / 1000.0))

    def alive(self, handle: _Proc) -> bool:
        return not handle.dead

    def close(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None
