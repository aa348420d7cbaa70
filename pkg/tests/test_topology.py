from __future__ import annotations

import asyncio
import json
import socket

import pytest

from faastree.bench.topology import launch, load_topology, validate_topology
from faastree.balancer import Balancer
from faastree.emulator.model import WorkerModel
from faastree.errors import ConfigInvalid
from faastree.protocol import CallRequest, Ok
from faastree.transport import RemoteNode
from faastree.worker.node import Worker

ECHO = {"function": "echo", "image": "builtin:echo", "concurrency": {"mode": "hard_limit", "limit": 4}}


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def worker(node_id: str, **extra) -> dict:
    return {"id": node_id, "kind": "worker", "runtime": "process", **extra}


def topo(*nodes: dict, functions=None) -> dict:
    return {"functions": [ECHO] if functions is None else functions, "nodes": list(nodes)}


@pytest.mark.parametrize(
    "data",
    [
        topo(),
        topo({"id": "a", "kind": "leaf", "children": ["a"]}),
        topo(worker("w"), worker("w")),
        topo({"id": "l", "kind": "leaf", "children": ["b"]}, {"id": "b", "kind": "balancer", "children": ["l2"]},
             {"id": "l2", "kind": "leaf", "children": ["w"]}, worker("w")),
        topo({"id": "b", "kind": "balancer", "children": ["w"]}, worker("w")),
        topo({"id": "b", "kind": "balancer", "strategy": "warm_first", "children": ["l"]},
             {"id": "l", "kind": "leaf", "children": ["w"]}, worker("w")),
        topo({"id": "l1", "kind": "leaf", "children": ["w1"]}, worker("w1"),
             {"id": "l2", "kind": "leaf", "children": ["w2"]}, worker("w2")),
        topo({"id": "l", "kind": "leaf", "children": ["ghost"]}),
        topo({"id": "l", "kind": "leaf", "children": ["w", "w"]}, worker("w")),
        topo({"id": "l", "kind": "leaf", "children": []}),
        topo({"id": "l", "kind": "leaf", "strategy": "fastest", "children": ["w"]}, worker("w")),
        topo({"id": "l", "kind": "router", "children": ["w"]}, worker("w")),
        topo(worker("w", runtime="vm")),
        topo({"id": "w", "kind": "worker", "runtime": "emulated"}),
        topo(worker("w", listen="nowhere")),
        topo({"id": "w", "kind": "worker", "runtime": "process", "children": ["v"]}, worker("v")),
        topo({"id": "a", "kind": "balancer", "children": ["b"]}, {"id": "b", "kind": "balancer", "children": ["a"]}),
        topo(worker("w"), functions=[{"function": "echo"}]),
    ],
    ids=[
        "empty", "self-cycle", "duplicate-id", "leaf-with-balancer-child", "balancer-with-worker-child",
        "stateful-balancer", "two-roots", "unknown-child", "duplicate-child", "childless-leaf",
        "unknown-strategy", "unknown-kind", "unknown-runtime", "emulated-without-model", "bad-listen",
        "worker-with-children", "two-node-cycle", "function-without-image",
    ],
)
def test_invalid_topologies(data):
    with pytest.raises(ConfigInvalid):
        validate_topology(data)


def test_valid_tree_finds_root():
    t = validate_topology(
        topo(
            {"id": "root", "kind": "balancer", "strategy": {"name": "random", "seed": 1}, "children": ["l1", "l2"]},
            {"id": "l1", "kind": "leaf", "strategy": "warm_first", "children": ["w1"]},
            {"id": "l2", "kind": "leaf", "strategy": "least_in_flight", "children": ["w2"]},
            worker("w1", max_instances=4),
            worker("w2"),
        )
    )
    assert t.root == "root"
    assert t.nodes["w1"].options == {"max_instances": 4}


def test_load_topology_errors(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_topology(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigInvalid):
        load_topology(bad)


def test_minimal_tree_answers(tmp_path):
    path = tmp_path / "topo.json"
    path.write_text(
        json.dumps(
            {
                "stores": {"image_root": "images", "config_root": "configs"},
                **topo({"id": "leaf", "kind": "leaf", "strategy": "warm_first", "children": ["w"]}, worker("w")),
            }
        )
    )

    async def main():
        async with await launch(load_topology(path)) as running:
            assert isinstance(running.root, Balancer)
            return await running.root.call(CallRequest.new("echo", b"ping"))

    resp = asyncio.run(main())
    assert resp.outcome == Ok(b"ping") and resp.worker_id == "w"
    assert (tmp_path / "configs").is_dir() and any((tmp_path / "images").rglob("*"))


def test_emulated_workers_share_a_model(tmp_path):
    WorkerModel.constant({"echo": 3.0}).save(tmp_path / "model.json")
    data = topo(
        {"id": "root", "kind": "balancer", "children": ["la", "lb"]},
        {"id": "la", "kind": "leaf", "children": ["a"]},
        {"id": "lb", "kind": "leaf", "children": ["b"]},
        {"id": "a", "kind": "worker", "model": "model.json"},
        {"id": "b", "kind": "worker", "model": "model.json", "seed": 9},
    )

    async def main():
        async with await launch(validate_topology(data, tmp_path)) as running:
            resps = [await running.root.call(CallRequest.new("echo")) for _ in range(20)]
            return resps, sorted(w.worker_id for w in running.workers())

    resps, ids = asyncio.run(main())
    assert ids == ["a", "b"]
    assert all(r.ok for r in resps) and {r.worker_id for r in resps} <= {"a", "b"}


def test_missing_model_file_is_config_error(tmp_path):
    data = topo({"id": "l", "kind": "leaf", "children": ["w"]}, {"id": "w", "kind": "worker", "model": "nope.json"})
    with pytest.raises(ConfigInvalid):
        asyncio.run(launch(validate_topology(data, tmp_path)))


def test_split_launch_over_tcp():
    port = free_port()
    data = topo({"id": "leaf", "kind": "leaf", "children": ["w"]}, worker("w", listen=f"127.0.0.1:{port}"))
    t = validate_topology(data)

    async def main():
        async with await launch(t, only="w") as backend:
            assert isinstance(backend.nodes["w"], Worker) and set(backend.nodes) == {"w"}
            async with await launch(t, only="leaf") as front:
                assert isinstance(front.nodes["w"], RemoteNode)
                return await front.root.call(CallRequest.new("echo", b"x"))

    resp = asyncio.run(main())
    assert resp.ok and resp.worker_id == "w"


def test_split_launch_needs_listen():
    t = validate_topology(topo({"id": "leaf", "kind": "leaf", "children": ["w"]}, worker("w")))
    with pytest.raises(ConfigInvalid):
        asyncio.run(launch(t, only="leaf"))
    with pytest.raises(ConfigInvalid):
        asyncio.run(launch(t, only="nobody"))
