"""Tree nodes that forward each call to one child.

A :class:`Balancer` whose children are all workers is a leaf: it polls the
workers' state and can route on it. Interior balancers only see other
balancers and route without state.
"""

from __future__ import annotations

import asyncio
import logging
import random
import time
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Union

from faastree.clock import epoch_ms
from faastree.errors import NotFound, TransportError
from faastree.protocol import CallRequest, CallResponse, ErrorCode, StopRequest, StopResponse, WorkerSnapshot

log = logging.getLogger(__name__)

STATE_TIMEOUT_S = 2.0


@dataclass(frozen=True)
class ChildRef:
    child_id: str
    node: Any
    kind: str = "worker"  # "worker" | "balancer"

    def __post_init__(self) -> None:
        if self.kind not in ("worker", "balancer"):
            raise ValueError(f"child kind must be worker or balancer, got {self.kind!r}")


def _wall_ms() -> float:
    return time.time() * 1000.0


class RoutingTable:
    """Children plus the latest worker snapshots.

    The snapshot map is replaced wholesale on refresh, so a reader always sees
    one consistent version.
    """

    def __init__(
        self,
        children: Iterable[ChildRef],
        snapshot_ttl_ms: int = 200,
        clock: Callable[[], float] = _wall_ms,
    ) -> None:
        self.children = list(children)
        ids = [c.child_id for c in self.children]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate child ids in {ids}")
        if snapshot_ttl_ms < 1:
            raise ValueError("snapshot_ttl_ms must be positive")
        self.snapshot_ttl_ms = snapshot_ttl_ms
        self.clock = clock
        self.snapshots: dict[str, tuple[WorkerSnapshot, float]] = {}
        self.errors: dict[str, str] = {}
        self._by_id = {c.child_id: c for c in self.children}

    def child(self, child_id: str) -> ChildRef:
        return self._by_id[child_id]

    @property
    def is_leaf(self) -> bool:
        return bool(self.children) and all(c.kind == "worker" for c in self.children)

    def put_snapshot(self, child_id: str, snapshot: WorkerSnapshot, fetched_at_ms: float | None = None) -> None:
        if self._by_id[child_id].kind != "worker":
            raise ValueError(f"{child_id} is not a worker")
        stamp = self.clock() if fetched_at_ms is None else fetched_at_ms
        self.snapshots = {**self.snapshots, child_id: (snapshot, stamp)}

    def snapshot(self, child_id: str, now_ms: float | None = None) -> WorkerSnapshot | None:
        """The child's snapshot, or None when absent or older than the ttl."""
        entry = self.snapshots.get(child_id)
        if entry is None:
            return None
        now = self.clock() if now_ms is None else now_ms
        if now - entry[1] > self.snapshot_ttl_ms:
            return None
        return entry[0]


def _in_flight(child_id: str, snaps: dict[str, WorkerSnapshot | None]) -> int:
    snap = snaps[child_id]
    return snap.total_in_flight if snap is not None else 0


class Random:
    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.rng = random.Random(seed)

    def choose(self, req, table: RoutingTable, candidates: list[str], capacity) -> str:
        return candidates[self.rng.randrange(len(candidates))]


class RoundRobin:
    def __init__(self) -> None:
        self.counter = 0

    def choose(self, req, table: RoutingTable, candidates: list[str], capacity) -> str:
        ids = [c.child_id for c in table.children]
        allowed = set(candidates)
        while True:
            pick = ids[self.counter % len(ids)]
            self.counter += 1
            if pick in allowed:
                return pick


class LeastInFlight:
    """Fewest in-flight requests per snapshot; unknown workers count as idle."""

    def choose(self, req, table: RoutingTable, candidates: list[str], capacity) -> str:
        now = table.clock()
        snaps = {cid: table.snapshot(cid, now) for cid in candidates}
        return min(candidates, key=lambda cid: (_in_flight(cid, snaps), cid))


class WarmFirst:
    """Prefer workers that already run an instance of the function with room."""

    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.fallback = Random(seed)

    def choose(self, req, table: RoutingTable, candidates: list[str], capacity) -> str:
        now = table.clock()
        snaps = {cid: table.snapshot(cid, now) for cid in candidates}
        limit = capacity(req.function)
        warm = [
            cid
            for cid in candidates
            if snaps[cid] is not None
            and any(i.in_flight < limit for i in snaps[cid].for_function(req.function))
        ]
        if warm:
            return min(warm, key=lambda cid: (_in_flight(cid, snaps), cid))
        return self.fallback.choose(req, table, candidates, capacity)


Strategy = Union[Random, RoundRobin, LeastInFlight, WarmFirst]


def strategy_from_config(spec: Any) -> Strategy:
    """Build a strategy from ``"round_robin"`` or ``{"name": "random", "seed": 7}``."""
    if isinstance(spec, str):
        spec = {"name": spec}
    if not isinstance(spec, dict) or "name" not in spec:
        raise ValueError(f"bad strategy {spec!r}")
    name = spec["name"]
    seed = int(spec.get("seed", 0))
    if name == "random":
        return Random(seed)
    if name == "round_robin":
        return RoundRobin()
    if name == "least_in_flight":
        return LeastInFlight()
    if name == "warm_first":
        return WarmFirst(seed)
    raise ValueError(f"unknown strategy {name!r}")


def _one_slot(function: str) -> float:
    return 1


def route(
    req: CallRequest,
    table: RoutingTable,
    strategy: Strategy,
    exclude: Iterable[str] = (),
    capacity: Callable[[str], float] = _one_slot,
) -> str:
    """Pick the child that should receive ``req``.

    ``capacity`` maps a function to its per-instance concurrency limit; it is
    only consulted by warm-aware routing.
    """
    excluded = set(exclude)
    candidates = [c.child_id for c in table.children if c.child_id not in excluded]
    if not candidates:
        raise ValueError("no child left to route to")
    return strategy.choose(req, table, candidates, capacity)


async def refresh_snapshots(table: RoutingTable) -> RoutingTable:
    """Poll every worker child; failures keep the stale entry until it expires."""
    workers = [c for c in table.children if c.kind == "worker"]

    async def fetch(child: ChildRef):
        try:
            return await asyncio.wait_for(child.node.state(), STATE_TIMEOUT_S)
        except (TransportError, OSError, asyncio.TimeoutError) as exc:
            return exc

    results = await asyncio.gather(*(fetch(c) for c in workers))
    now = table.clock()
    fresh = dict(table.snapshots)
    errors = {}
    for child, result in zip(workers, results):
        if isinstance(result, WorkerSnapshot):
            fresh[child.child_id] = (result, now)
        else:
            errors[child.child_id] = f"{type(result).__name__}: {result}"
    table.snapshots = fresh
    table.errors = errors
    return table


class Balancer:
    """A routing node. Exposes the same ``call`` as a worker."""

    def __init__(
        self,
        node_id: str,
        children: Iterable[ChildRef],
        strategy: Any,
        *,
        snapshot_ttl_ms: int = 200,
        configs: Any = None,
    ) -> None:
        self.node_id = node_id
        self.table = RoutingTable(children, snapshot_ttl_ms, clock=epoch_ms)
        if not self.table.children:
            raise ValueError(f"balancer {node_id} has no children")
        self.strategy = strategy
        self.configs = configs
        self.forwarded: dict[str, int] = {c.child_id: 0 for c in self.table.children}
        self._refresher: asyncio.Task | None = None

    def __repr__(self) -> str:
        return f"Balancer({self.node_id!r}, leaf={self.is_leaf})"

    @property
    def is_leaf(self) -> bool:
        return self.table.is_leaf

    def capacity(self, function: str) -> float:
        if self.configs is None:
            return 1
        try:
            return self.configs.get_config(function).concurrency.limit
        except (NotFound, ValueError):
            return 1

    async def start(self) -> Balancer:
        if self.is_leaf and self._refresher is None:
            await refresh_snapshots(self.table)
            self._refresher = asyncio.create_task(self._refresh_loop())
        return self

    async def close(self) -> None:
        if self._refresher is not None:
            self._refresher.cancel()
            await asyncio.gather(self._refresher, return_exceptions=True)
            self._refresher = None

    async def _refresh_loop(self) -> None:
        while True:
            await asyncio.sleep(self.table.snapshot_ttl_ms / 2000.0)
            await refresh_snapshots(self.table)

    async def call(self, req: CallRequest) -> CallResponse:
        tried: list[str] = []
        last: CallResponse | None = None
        for _ in range(2):
            try:
                child_id = route(req, self.table, self.strategy, tried, self.capacity)
            except ValueError:
                break
            self.forwarded[child_id] += 1
            try:
                resp = await self.table.child(child_id).node.call(req)
            except (TransportError, OSError) as exc:
                resp = CallResponse.error(req.call_id, ErrorCode.TRANSPORT_ERROR, str(exc))
            if resp.code is not ErrorCode.TRANSPORT_ERROR:
                return resp
            log.info("%s: child %s failed (%s); retrying elsewhere", self.node_id, child_id, resp.outcome)
            tried.append(child_id)
            last = resp
        return last or CallResponse.error(req.call_id, ErrorCode.TRANSPORT_ERROR, "no reachable child")

    async def stop_on(self, child_id: str, req: StopRequest) -> StopResponse:
        """Forward a stop command to one worker child (leaves only)."""
        child = self.table.child(child_id)
        if child.kind != "worker":
            raise ValueError(f"{child_id} is not a worker")
        return await child.node.stop(req)
