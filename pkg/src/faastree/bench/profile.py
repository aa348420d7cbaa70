"""Load profiles and their arrival schedules."""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass
from typing import Any, Union

from faastree.protocol import validate_function_id


@dataclass(frozen=True)
class ClosedLoop:
    workers: int
    calls_per_worker: int

    def __post_init__(self) -> None:
        if self.workers < 1 or self.calls_per_worker < 1:
            raise ValueError("closed loop needs positive workers and calls_per_worker")

    @property
    def total_calls(self) -> int:
        return self.workers * self.calls_per_worker


@dataclass(frozen=True)
class OpenLoop:
    rate_per_s: float
    duration_ms: int
    arrivals: str = "poisson"  # "poisson" | "uniform"

    def __post_init__(self) -> None:
        if self.rate_per_s <= 0 or self.duration_ms < 1:
            raise ValueError("open loop needs a positive rate and duration")
        if self.arrivals not in ("poisson", "uniform"):
            raise ValueError(f"arrivals must be poisson or uniform, got {self.arrivals!r}")


Pattern = Union[ClosedLoop, OpenLoop]


@dataclass(frozen=True)
class Phase:
    function: str
    pattern: Pattern
    payload_bytes: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        validate_function_id(self.function)
        if self.payload_bytes < 0:
            raise ValueError("payload_bytes must be non-negative")


@dataclass(frozen=True)
class LoadProfile:
    phases: tuple[Phase, ...]
    deadline_ms: int = 30_000

    def __post_init__(self) -> None:
        object.__setattr__(self, "phases", tuple(self.phases))
        if not self.phases:
            raise ValueError("a load profile needs at least one phase")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LoadProfile:
        phases = []
        for raw in data["phases"]:
            pat = dict(raw["pattern"])
            kind = pat.pop("kind")
            if kind == "closed_loop":
                pattern: Pattern = ClosedLoop(int(pat["workers"]), int(pat["calls_per_worker"]))
            elif kind == "open_loop":
                pattern = OpenLoop(float(pat["rate_per_s"]), int(pat["duration_ms"]), pat.get("arrivals", "poisson"))
            else:
                raise ValueError(f"unknown pattern kind {kind!r}")
            phases.append(Phase(raw["function"], pattern, int(raw.get("payload_bytes", 0)), int(raw.get("seed", 0))))
        return cls(tuple(phases), int(data.get("deadline_ms", 30_000)))

    def to_dict(self) -> dict[str, Any]:
        out = []
        for ph in self.phases:
            if isinstance(ph.pattern, ClosedLoop):
                pat = {"kind": "closed_loop", "workers": ph.pattern.workers, "calls_per_worker": ph.pattern.calls_per_worker}
            else:
                pat = {
                    "kind": "open_loop",
                    "rate_per_s": ph.pattern.rate_per_s,
                    "duration_ms": ph.pattern.duration_ms,
                    "arrivals": ph.pattern.arrivals,
                }
            out.append({"function": ph.function, "pattern": pat, "payload_bytes": ph.payload_bytes, "seed": ph.seed})
        return {"phases": out, "deadline_ms": self.deadline_ms}

    @classmethod
    def load(cls, path: str | os.PathLike) -> LoadProfile:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @property
    def total_calls(self) -> int:
        return sum(len(arrival_schedule(ph)) for ph in self.phases)


def arrival_schedule(phase: Phase) -> list[float]:
    """Offsets in ms from the phase start at which calls are issued.

    Closed-loop phases have no schedule of their own; they report one zero
    offset per call.
    """
    pat = phase.pattern
    if isinstance(pat, ClosedLoop):
        return [0.0] * pat.total_calls
    if pat.arrivals == "uniform":
        n = round(pat.rate_per_s * pat.duration_ms / 1000.0)
        return [k * 1000.0 / pat.rate_per_s for k in range(n)]
    rng = random.Random(phase.seed)
    offsets = []
    t = rng.expovariate(pat.rate_per_s) * 1000.0
    while t < pat.duration_ms:
        offsets.append(t)
        t += rng.expovariate(pat.rate_per_s) * 1000.0
    return offsets
