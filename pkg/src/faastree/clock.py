"""Loop-relative clocks and a virtual-time event loop.

All timing inside nodes goes through the running loop's ``time()`` so the
same code can run in real time or on :class:`VirtualTimeLoop`, where sleeps
complete instantly and replays are reproducible.
"""

from __future__ import annotations

import asyncio
import selectors
import time
import weakref
from typing import Awaitable, TypeVar

T = TypeVar("T")

_anchors: "weakref.WeakKeyDictionary[asyncio.AbstractEventLoop, tuple[float, float]]" = (
    weakref.WeakKeyDictionary()
)


def monotonic() -> float:
    """Seconds on the running loop's clock."""
    return asyncio.get_running_loop().time()


def epoch_ms() -> float:
    """Unix epoch milliseconds derived from the running loop's clock."""
    loop = asyncio.get_running_loop()
    anchor = _anchors.get(loop)
    if anchor is None:
        anchor = (time.time() * 1000.0, loop.time())
        _anchors[loop] = anchor
    wall0, mono0 = anchor
    return wall0 + (loop.time() - mono0) * 1000.0


class _VirtualSelector(selectors.DefaultSelector):
    def __init__(self) -> None:
        super().__init__()
        self.loop: VirtualTimeLoop | None = None

    def select(self, timeout=None):
        ready = super().select(0)
        if ready or timeout == 0:
            return ready
        if timeout is None:
            # Nothing scheduled: only an external wakeup can make progress.
            return super().select(None)
        self.loop._now += timeout
        return []


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    """Event loop whose clock jumps straight to the next scheduled timer.

    Only suitable for code that never waits on real I/O (sockets or
    subprocesses would see time race ahead of them).
    """

    def __init__(self) -> None:
        self._now = 0.0
        selector = _VirtualSelector()
        selector.loop = self
        super().__init__(selector)

    def time(self) -> float:
        return self._now


def run_virtual(main: Awaitable[T]) -> T:
    loop = VirtualTimeLoop()
    try:
        return loop.run_until_complete(main)
    finally:
        loop.run_until_complete(loop.shutdown_asyncgens())
        loop.close()
