"""Whole-experiment topology files: validate, seed stores, launch nodes.

A topology is one JSON document::

    {
      "stores": {"image_root": "store", "config_root": "store"},
      "functions": [{"function": "echo", "image": "builtin:echo?sleep_ms=5", ...}],
      "nodes": [
        {"id": "root", "kind": "balancer", "strategy": "random", "children": ["leaf-a"],
         "listen": "127.0.0.1:7000"},
        {"id": "leaf-a", "kind": "leaf", "strategy": "warm_first", "children": ["w1"]},
        {"id": "w1", "kind": "worker", "runtime": "emulated", "model": "model.json"}
      ]
    }

Relative paths are resolved against the topology file's directory.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from faastree.balancer import Balancer, ChildRef, strategy_from_config
from faastree.emulator.model import WorkerModel
from faastree.emulator.runtime import REFERENCE_CONCURRENCY, EmulatedRuntime
from faastree.errors import ConfigInvalid
from faastree.images import builtin_image
from faastree.protocol import FunctionConfig
from faastree.registry import ConfigStore, ImageStore
from faastree.transport import RemoteNode, TcpServer, parse_address
from faastree.worker.node import Worker
from faastree.worker.runtime import ProcessRuntime

KINDS = ("balancer", "leaf", "worker")
STATELESS = ("random", "round_robin")


@dataclass
class NodeSpec:
    id: str
    kind: str
    strategy: Any = "random"
    children: list[str] = field(default_factory=list)
    listen: str | None = None
    runtime: str = "emulated"
    model: str | None = None
    options: dict[str, Any] = field(default_factory=dict)


@dataclass
class Topology:
    nodes: dict[str, NodeSpec]
    functions: list[dict[str, Any]]
    image_root: Path | None
    config_root: Path | None
    root: str
    base_dir: Path


_NODE_KEYS = {"id", "kind", "strategy", "children", "listen", "runtime", "model"}


def _strategy_name(spec: Any) -> str:
    return spec if isinstance(spec, str) else dict(spec).get("name", "")


def validate_topology(data: dict[str, Any], base_dir: str | os.PathLike = ".") -> Topology:
    """Check the schema and the tree shape; raise ConfigInvalid on any defect."""
    base = Path(base_dir)
    raw_nodes = data.get("nodes")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise ConfigInvalid("topology needs a non-empty 'nodes' list")
    nodes: dict[str, NodeSpec] = {}
    for raw in raw_nodes:
        if not isinstance(raw, dict) or "id" not in raw or "kind" not in raw:
            raise ConfigInvalid(f"node entries need 'id' and 'kind': {raw!r}")
        node_id = str(raw["id"])
        if node_id in nodes:
            raise ConfigInvalid(f"duplicate node id {node_id!r}")
        if raw["kind"] not in KINDS:
            raise ConfigInvalid(f"node {node_id}: kind must be one of {KINDS}")
        children = raw.get("children", [])
        if not isinstance(children, list):
            raise ConfigInvalid(f"node {node_id}: children must be a list")
        nodes[node_id] = NodeSpec(
            id=node_id,
            kind=raw["kind"],
            strategy=raw.get("strategy", "random"),
            children=[str(c) for c in children],
            listen=raw.get("listen"),
            runtime=raw.get("runtime", "emulated"),
            model=raw.get("model"),
            options={k: v for k, v in raw.items() if k not in _NODE_KEYS},
        )

    for spec in nodes.values():
        for child in spec.children:
            if child not in nodes:
                raise ConfigInvalid(f"node {spec.id}: unknown child {child!r}")
        if len(set(spec.children)) != len(spec.children):
            raise ConfigInvalid(f"node {spec.id}: duplicate children")
        if spec.listen is not None:
            try:
                parse_address(spec.listen)
            except ValueError as exc:
                raise ConfigInvalid(f"node {spec.id}: {exc}") from None
        if spec.kind == "worker":
            if spec.children:
                raise ConfigInvalid(f"worker {spec.id} cannot have children")
            if spec.runtime not in ("process", "emulated"):
                raise ConfigInvalid(f"worker {spec.id}: runtime must be process or emulated")
            if spec.runtime == "emulated" and not spec.model:
                raise ConfigInvalid(f"worker {spec.id}: emulated runtime needs a model")
            continue
        if not spec.children:
            raise ConfigInvalid(f"{spec.kind} {spec.id} has no children")
        try:
            strategy_from_config(spec.strategy)
        except (ValueError, TypeError) as exc:
            raise ConfigInvalid(f"node {spec.id}: {exc}") from None
        kinds = {nodes[c].kind for c in spec.children}
        if spec.kind == "leaf" and kinds != {"worker"}:
            raise ConfigInvalid(f"leaf {spec.id} may only have worker children")
        if spec.kind == "balancer":
            if "worker" in kinds:
                raise ConfigInvalid(f"balancer {spec.id} routes to workers; declare it as a leaf")
            if _strategy_name(spec.strategy) not in STATELESS:
                raise ConfigInvalid(f"balancer {spec.id}: state-aware strategies are only allowed at leaves")

    _check_acyclic(nodes)
    parents = {c for spec in nodes.values() for c in spec.children}
    roots = [n for n in nodes if n not in parents]
    if len(roots) != 1:
        raise ConfigInvalid(f"topology needs exactly one root, found {roots or 'none (cycle)'}")

    stores = data.get("stores", {})
    functions = data.get("functions", [])
    if not isinstance(functions, list):
        raise ConfigInvalid("'functions' must be a list")
    for fn in functions:
        if not isinstance(fn, dict) or "function" not in fn:
            raise ConfigInvalid(f"function entries need a 'function' name: {fn!r}")
        if "image" not in fn and "image_digest" not in fn:
            raise ConfigInvalid(f"function {fn['function']}: give 'image' or 'image_digest'")

    def resolve(key: str) -> Path | None:
        value = stores.get(key)
        return None if value is None else base / value

    return Topology(nodes, functions, resolve("image_root"), resolve("config_root"), roots[0], base)


def _check_acyclic(nodes: dict[str, NodeSpec]) -> None:
    state: dict[str, int] = {}  # 1 = on stack, 2 = done

    def visit(node_id: str, path: list[str]) -> None:
        mark = state.get(node_id)
        if mark == 2:
            return
        if mark == 1:
            raise ConfigInvalid(f"cycle in topology: {' -> '.join(path + [node_id])}")
        state[node_id] = 1
        for child in nodes[node_id].children:
            visit(child, path + [node_id])
        state[node_id] = 2

    for node_id in nodes:
        visit(node_id, [])


def load_topology(path: str | os.PathLike) -> Topology:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read topology {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigInvalid("topology must be a JSON object")
    return validate_topology(data, path.parent)


def seed_stores(topo: Topology, images: ImageStore, configs: ConfigStore) -> list[FunctionConfig]:
    seeded = []
    for raw in topo.functions:
        entry = dict(raw)
        image = entry.pop("image", None)
        if image is not None:
            if image.startswith("builtin:"):
                data = builtin_image(image)
            else:
                data = (topo.base_dir / image).read_bytes()
            entry["image_digest"] = images.put_image(data)
        entry.setdefault("memory_limit_mb", 128)
        entry.setdefault("cpu_millis", 1000)
        entry.setdefault("concurrency", {"mode": "single"})
        entry.setdefault("idle_timeout_ms", 60_000)
        entry.setdefault("exec_deadline_ms", 30_000)
        try:
            cfg = FunctionConfig.from_dict(entry)
        except (ValueError, KeyError) as exc:
            raise ConfigInvalid(f"function {raw.get('function')}: {exc}") from None
        configs.put_config(cfg)
        seeded.append(cfg)
    return seeded


class RunningTopology:
    def __init__(self, topo: Topology) -> None:
        self.topology = topo
        self.nodes: dict[str, Any] = {}
        self.servers: dict[str, TcpServer] = {}
        self._tmp: tempfile.TemporaryDirectory | None = None
        self._runtimes: list[ProcessRuntime] = []
        self.images: ImageStore | None = None
        self.configs: ConfigStore | None = None

    @property
    def root(self) -> Any:
        return self.nodes[self.topology.root]

    @property
    def root_address(self) -> str | None:
        server = self.servers.get(self.topology.root)
        return server.address if server else None

    def workers(self) -> list[Worker]:
        return [n for n in self.nodes.values() if isinstance(n, Worker)]

    async def close(self) -> None:
        for server in self.servers.values():
            await server.close()
        for node in self.nodes.values():
            if isinstance(node, Balancer):
                await node.close()
        for node in self.nodes.values():
            if isinstance(node, Worker):
                await node.close(drain=True)
            elif isinstance(node, RemoteNode):
                await node.close()
        for runtime in self._runtimes:
            runtime.close()
        if self._tmp is not None:
            self._tmp.cleanup()

    async def __aenter__(self) -> RunningTopology:
        return self

    async def __aexit__(self, *exc) -> None:
        await self.close()


def _postorder(topo: Topology) -> list[str]:
    order: list[str] = []
    seen: set[str] = set()

    def visit(node_id: str) -> None:
        if node_id in seen:
            return
        seen.add(node_id)
        for child in topo.nodes[node_id].children:
            visit(child)
        order.append(node_id)

    for node_id in topo.nodes:
        visit(node_id)
    return order


async def launch(topo: Topology, only: str | None = None) -> RunningTopology:
    """Start every node in this process, or just ``only`` with remote children.

    Nodes with a ``listen`` address are also served over TCP.
    """
    if only is not None and only not in topo.nodes:
        raise ConfigInvalid(f"no node named {only!r}")
    running = RunningTopology(topo)
    image_root, config_root = topo.image_root, topo.config_root
    if image_root is None or config_root is None:
        running._tmp = tempfile.TemporaryDirectory(prefix="faastree-stores-")
        image_root = image_root or Path(running._tmp.name)
        config_root = config_root or Path(running._tmp.name)
    running.images = ImageStore(image_root)
    running.configs = ConfigStore(config_root)
    seed_stores(topo, running.images, running.configs)
    models: dict[str, WorkerModel] = {}

    try:
        for node_id in _postorder(topo):
            spec = topo.nodes[node_id]
            if only is not None and node_id != only:
                if node_id in topo.nodes[only].children:
                    if spec.listen is None:
                        raise ConfigInvalid(f"node {node_id} must declare 'listen' to run in its own process")
                    running.nodes[node_id] = RemoteNode(spec.listen)
                continue
            if spec.kind == "worker":
                node = await _make_worker(spec, topo, running, models).start()
            else:
                children = [
                    ChildRef(c, running.nodes[c], "worker" if topo.nodes[c].kind == "worker" else "balancer")
                    for c in spec.children
                ]
                node = Balancer(
                    node_id,
                    children,
                    strategy_from_config(spec.strategy),
                    snapshot_ttl_ms=int(spec.options.get("snapshot_ttl_ms", 200)),
                    configs=running.configs,
                )
                await node.start()
            running.nodes[node_id] = node
            if spec.listen is not None:
                running.servers[node_id] = await TcpServer(node, spec.listen).start()
    except BaseException:
        await running.close()
        raise
    return running


def _make_worker(spec: NodeSpec, topo: Topology, running: RunningTopology, models: dict) -> Worker:
    opts = spec.options
    if spec.runtime == "emulated":
        path = str(topo.base_dir / spec.model)
        if path not in models:
            try:
                models[path] = WorkerModel.load(path)
            except (OSError, ValueError, TypeError) as exc:
                raise ConfigInvalid(f"worker {spec.id}: cannot load model {path}: {exc}") from None
        runtime = EmulatedRuntime(
            models[path],
            seed=f"{opts.get('seed', 0)}/{spec.id}",
            reference_concurrency=int(opts.get("reference_concurrency", REFERENCE_CONCURRENCY)),
        )
    else:
        runtime = ProcessRuntime()
        running._runtimes.append(runtime)
    kwargs = {k: int(opts[k]) for k in ("max_instances", "queue_cap", "drain_timeout_ms") if k in opts}
    return Worker(spec.id, running.configs, runtime, running.images, **kwargs)
