"""Admission and replica-scaling decisions.

Both are pure with respect to the instance table they are handed; the worker
applies the decision inside its critical section.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence, Union

from faastree.protocol import CallRequest, FunctionConfig, Unlimited

MAX_INSTANCES_PER_FUNCTION = 256
QUEUE_CAP = 1024


class InstanceView(Protocol):
    instance_id: str
    in_flight: int
    status: str


@dataclass(frozen=True)
class Admit:
    instance_id: str


@dataclass(frozen=True)
class StartNew:
    pass


@dataclass(frozen=True)
class Queue:
    pass


@dataclass(frozen=True)
class Reject:
    code: str = "OVERLOADED"


AdmissionDecision = Union[Admit, StartNew, Queue, Reject]


def admit(
    req: CallRequest | None,
    instances: Sequence[InstanceView],
    config: FunctionConfig,
    queue_len: int,
    max_instances: int = MAX_INSTANCES_PER_FUNCTION,
    queue_cap: int = QUEUE_CAP,
) -> AdmissionDecision:
    """Decide where a request for ``config.function`` goes.

    Limited modes bin-pack: the busiest instance that still has room wins, so
    the rest stay idle and can be reclaimed by the reaper. Unlimited mode
    spreads to the least loaded instance and leaves scaling to :class:`Scaler`.
    """
    live = [i for i in instances if i.status != "stopping"]
    mode = config.concurrency
    if isinstance(mode, Unlimited):
        if live:
            best = min(live, key=lambda i: (i.in_flight, i.instance_id))
            return Admit(best.instance_id)
        return StartNew()

    limit = mode.limit
    open_slots = [i for i in live if i.in_flight < limit]
    if open_slots:
        best = min(open_slots, key=lambda i: (-i.in_flight, i.instance_id))
        return Admit(best.instance_id)
    if len(live) < max_instances:
        return StartNew()
    if queue_len < queue_cap:
        return Queue()
    return Reject()


@dataclass(frozen=True)
class ScaleUp:
    pass


@dataclass(frozen=True)
class ScaleDown:
    instance_id: str


ScaleAction = Union[ScaleUp, ScaleDown]


class Scaler:
    """Hysteresis over periodic utilization checks for Unlimited functions.

    Scale up after two consecutive checks with mean utilization above the
    threshold; scale down (one idle replica) after two consecutive checks
    below half the threshold while more than one replica exists.
    """

    def __init__(self, scale_down: bool = True) -> None:
        self.scale_down = scale_down
        self.high_streak = 0
        self.low_streak = 0

    def check(
        self,
        instances: Sequence[InstanceView],
        config: FunctionConfig,
        utilization_fn: Callable[[InstanceView], float],
    ) -> list[ScaleAction]:
        mode = config.concurrency
        if not isinstance(mode, Unlimited):
            raise ValueError(f"scale_check needs an Unlimited function, got {mode}")
        live = [i for i in instances if i.status != "stopping"]
        if not live:
            self.high_streak = self.low_streak = 0
            return []
        mean = sum(utilization_fn(i) for i in live) / len(live)
        idle = [i for i in live if i.in_flight == 0 and i.status != "starting"]

        if mean > mode.util_threshold:
            self.high_streak += 1
            self.low_streak = 0
        elif self.scale_down and mean < mode.util_threshold / 2 and idle and len(live) > 1:
            self.low_streak += 1
            self.high_streak = 0
        else:
            self.high_streak = self.low_streak = 0

        if self.high_streak >= 2:
            self.high_streak = 0
            return [ScaleUp()]
        if self.low_streak >= 2:
            self.low_streak = 0
            victim = min(idle, key=lambda i: (i.in_flight, i.instance_id))
            return [ScaleDown(victim.instance_id)]
        return []
