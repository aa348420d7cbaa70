from __future__ import annotations

import asyncio
import struct

import pytest

from faastree.balancer import Balancer, ChildRef, RoundRobin
from faastree.errors import TargetUnreachable, TransportError
from faastree.protocol import CallRequest, ErrorCode, HardLimit, StateRequest, StopRequest, decode_message, encode_message
from faastree.transport import RemoteNode, TcpServer, parse_address, read_message

from support import config, emulated_worker, static


def test_parse_address():
    assert parse_address("127.0.0.1:8080") == ("127.0.0.1", 8080)
    for bad in ("localhost", "host:port", ":"):
        with pytest.raises(ValueError):
            parse_address(bad)


async def _served(latency_ms: float = 10.0, worker_id: str = "w"):
    worker = await emulated_worker(worker_id, static(config("f", HardLimit(16))), latency_ms).start()
    server = await TcpServer(worker).start()
    return worker, server


def test_call_state_stop_over_tcp():
    async def main():
        worker, server = await _served()
        node = RemoteNode(server.address)
        resp = await node.call(CallRequest.new("f", b"x" * 1000))
        snap = await node.state()
        stop = await node.stop(StopRequest("w", function="f"))
        missing = await node.stop(StopRequest("w", instance_id="nope"))
        await node.close()
        await server.close()
        await worker.close()
        return resp, snap, stop, missing

    resp, snap, stop, missing = asyncio.run(main())
    assert resp.ok and resp.worker_id == "w" and resp.cold_start
    assert snap.worker_id == "w" and len(snap.instances) == 1
    assert stop.ok
    assert missing.outcome.code is ErrorCode.NOT_FOUND


def test_many_concurrent_calls_keep_their_ids():
    async def main():
        worker, server = await _served(latency_ms=20)
        node = RemoteNode(server.address)
        reqs = [CallRequest.new("f", bytes([i % 256])) for i in range(200)]
        resps = await asyncio.gather(*(node.call(r) for r in reqs))
        await node.close()
        await server.close()
        await worker.close()
        return reqs, resps

    reqs, resps = asyncio.run(main())
    assert [r.call_id for r in resps] == [r.call_id for r in reqs]
    assert all(r.ok for r in resps)


def test_overlapping_requests_on_one_connection():
    async def main():
        worker, server = await _served(latency_ms=50)
        reader, writer = await asyncio.open_connection(*parse_address(server.address))
        reqs = [CallRequest.new("f") for _ in range(5)]
        for r in reqs:
            writer.write(encode_message(r))
        await writer.drain()
        replies = [await read_message(reader) for _ in reqs]
        writer.close()
        await server.close()
        await worker.close()
        return reqs, replies

    reqs, replies = asyncio.run(main())
    assert {r.call_id for r in replies} == {r.call_id for r in reqs}
    # Served concurrently: all five took one latency, not five.
    assert max(r.exec_ms for r in replies) < 150


def test_malformed_frame_closes_connection():
    async def main():
        worker, server = await _served()
        reader, writer = await asyncio.open_connection(*parse_address(server.address))
        body = b'{"type":"bogus"}'
        writer.write(struct.pack(">I", len(body)) + body)
        await writer.drain()
        data = await asyncio.wait_for(reader.read(), 2)
        writer.close()
        await server.close()
        await worker.close()
        return data

    assert asyncio.run(main()) == b""


def test_unreachable_target():
    async def main():
        node = RemoteNode("127.0.0.1:1", connect_timeout=0.5)
        with pytest.raises(TargetUnreachable):
            await node.probe()
        resp = await node.call(CallRequest.new("f"))
        with pytest.raises(TransportError):
            await node.state()
        return resp

    assert asyncio.run(main()).code is ErrorCode.TRANSPORT_ERROR


def test_state_of_dead_worker_drops_connection():
    async def main():
        worker, server = await _served()
        await worker.close()
        node = RemoteNode(server.address)
        with pytest.raises(TransportError):
            await node.state(timeout=2)
        await node.close()
        await server.close()

    asyncio.run(main())


def test_remote_deadline_when_server_is_silent():
    async def main():
        async def silent(reader, writer):
            await reader.read()

        srv = await asyncio.start_server(silent, "127.0.0.1", 0)
        port = srv.sockets[0].getsockname()[1]
        resp = await RemoteNode(f"127.0.0.1:{port}").call(CallRequest.new("f", deadline_ms=50))
        srv.close()
        await srv.wait_closed()
        return resp

    assert asyncio.run(main()).code is ErrorCode.DEADLINE_EXCEEDED


def test_killed_remote_worker_is_retried_on_survivor():
    async def main():
        a, server_a = await _served(latency_ms=200, worker_id="a")
        b, server_b = await _served(latency_ms=200, worker_id="b")
        remote_a, remote_b = RemoteNode(server_a.address), RemoteNode(server_b.address)
        leaf = Balancer("leaf", [ChildRef("a", remote_a, "worker"), ChildRef("b", remote_b, "worker")], RoundRobin())
        calls = [asyncio.ensure_future(leaf.call(CallRequest.new("f"))) for _ in range(10)]
        await asyncio.sleep(0.05)
        await server_a.close()
        await a.kill()
        resps = await asyncio.gather(*calls)
        for n in (remote_a, remote_b):
            await n.close()
        await server_b.close()
        await b.close()
        return resps, leaf.forwarded

    resps, forwarded = asyncio.run(main())
    assert all(r.ok and r.worker_id == "b" for r in resps)
    assert forwarded == {"a": 5, "b": 10}


def test_state_request_frame_reaches_worker():
    async def main():
        worker, server = await _served(worker_id="w9")
        reader, writer = await asyncio.open_connection(*parse_address(server.address))
        writer.write(encode_message(StateRequest("w9")))
        await writer.drain()
        reply = await read_message(reader)
        writer.close()
        await server.close()
        await worker.close()
        return reply

    assert asyncio.run(main()).worker_id == "w9"
