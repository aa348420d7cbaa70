"""In-process and TCP transports for the uniform node interface.

Any object with ``async call(req)``, ``async state()`` and ``async stop(req)``
is a node. In-process handles are used directly; :class:`RemoteNode` gives
the same surface over TCP, and :class:`TcpServer` exposes a local node on a
socket.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Any, Protocol

from faastree.errors import DecodeMalformed, TargetUnreachable, TransportError
from faastree.protocol import (
    HEADER,
    MAX_FRAME,
    CallRequest,
    CallResponse,
    ErrorCode,
    Message,
    StateRequest,
    StopRequest,
    StopResponse,
    WorkerSnapshot,
    decode_message,
    encode_message,
)

log = logging.getLogger(__name__)

DEADLINE_GRACE_S = 1.0


class Node(Protocol):
    async def call(self, req: CallRequest) -> CallResponse: ...


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


async def read_message(reader: asyncio.StreamReader) -> Message:
    header = await reader.readexactly(HEADER.size)
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME:
        raise DecodeMalformed(f"frame length {length} exceeds {MAX_FRAME}")
    body = await reader.readexactly(length)
    msg, _ = decode_message(header + body)
    return msg


class RemoteNode:
    """Client side of the TCP transport.

    Each in-flight request holds its own pooled connection, so responses
    never need to be demultiplexed.
    """

    def __init__(self, address: str, connect_timeout: float = 2.0) -> None:
        self.address = address
        self.host, self.port = parse_address(address)
        self.connect_timeout = connect_timeout
        self._idle: list[tuple[asyncio.StreamReader, asyncio.StreamWriter]] = []

    def __repr__(self) -> str:
        return f"RemoteNode({self.address!r})"

    async def _connect(self) -> tuple[asyncio.StreamReader, asyncio.StreamWriter]:
        try:
            return await asyncio.wait_for(
                asyncio.open_connection(self.host, self.port), self.connect_timeout
            )
        except (OSError, asyncio.TimeoutError) as exc:
            raise TransportError(f"cannot connect to {self.address}: {exc}") from None

    async def probe(self) -> None:
        """Raise TargetUnreachable unless a connection can be opened."""
        try:
            conn = await self._connect()
        except TransportError as exc:
            raise TargetUnreachable(str(exc)) from None
        self._idle.append(conn)

    async def request(self, msg: Message, timeout: float | None = None) -> Message:
        conn = self._idle.pop() if self._idle else await self._connect()
        reader, writer = conn
        try:
            writer.write(encode_message(msg))
            await writer.drain()
            reply = await asyncio.wait_for(read_message(reader), timeout)
        except asyncio.TimeoutError:
            writer.close()
            raise
        except (OSError, asyncio.IncompleteReadError, DecodeMalformed) as exc:
            writer.close()
            raise TransportError(f"{self.address}: {exc!r}") from None
        except BaseException:
            writer.close()
            raise
        self._idle.append(conn)
        return reply

    async def call(self, req: CallRequest) -> CallResponse:
        try:
            reply = await self.request(req, req.deadline_ms / 1000.0 + DEADLINE_GRACE_S)
        except asyncio.TimeoutError:
            return CallResponse.error(req.call_id, ErrorCode.DEADLINE_EXCEEDED, "no response before deadline")
        except TransportError as exc:
            return CallResponse.error(req.call_id, ErrorCode.TRANSPORT_ERROR, str(exc))
        if not isinstance(reply, CallResponse) or reply.call_id != req.call_id:
            return CallResponse.error(req.call_id, ErrorCode.TRANSPORT_ERROR, "mismatched reply")
        return reply

    async def state(self, timeout: float = 5.0) -> WorkerSnapshot:
        try:
            reply = await self.request(StateRequest(), timeout)
        except asyncio.TimeoutError:
            raise TransportError(f"{self.address}: state request timed out") from None
        if not isinstance(reply, WorkerSnapshot):
            raise TransportError(f"{self.address}: unexpected reply {type(reply).__name__}")
        return reply

    async def stop(self, req: StopRequest, timeout: float = 30.0) -> StopResponse:
        try:
            reply = await self.request(req, timeout)
        except asyncio.TimeoutError:
            raise TransportError(f"{self.address}: stop request timed out") from None
        if not isinstance(reply, StopResponse):
            raise TransportError(f"{self.address}: unexpected reply {type(reply).__name__}")
        return reply

    async def close(self) -> None:
        while self._idle:
            _, writer = self._idle.pop()
            writer.close()


def connect(target: Any) -> Any:
    """Turn an address string into a RemoteNode; pass node handles through."""
    if isinstance(target, str):
        return RemoteNode(target)
    return target


async def call(target: Any, req: CallRequest) -> CallResponse:
    return await connect(target).call(req)


class TcpServer:
    """Serve one node on a TCP address. Requests on a connection may overlap."""

    def __init__(self, node: Any, address: str = "127.0.0.1:0") -> None:
        self.node = node
        self.host, self.port = parse_address(address)
        self._server: asyncio.base_events.Server | None = None
        self._writers: set[asyncio.StreamWriter] = set()
        self._tasks: set[asyncio.Task] = set()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    async def start(self) -> TcpServer:
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
        for writer in list(self._writers):
            writer.close()
        for task in list(self._tasks):
            task.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)
        if self._server is not None:
            await self._server.wait_closed()
            self._server = None

    async def _dispatch(self, msg: Message) -> Message | None:
        if isinstance(msg, CallRequest):
            return await self.node.call(msg)
        if isinstance(msg, StateRequest) and hasattr(self.node, "state"):
            return await self.node.state()
        if isinstance(msg, StopRequest) and hasattr(self.node, "stop"):
            return await self.node.stop(msg)
        return None

    async def _serve_one(self, msg: Message, writer: asyncio.StreamWriter, lock: asyncio.Lock) -> None:
        try:
            reply = await self._dispatch(msg)
        except Exception as exc:  # the peer sees a dropped connection, never a hang
            log.warning("%s failed on %s: %r; closing connection", type(msg).__name__, self.address, exc)
            writer.close()
            return
        if reply is None:
            log.warning("unsupported %s on %s; closing connection", type(msg).__name__, self.address)
            writer.close()
            return
        async with lock:
            writer.write(encode_message(reply))
            await writer.drain()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._writers.add(writer)
        lock = asyncio.Lock()
        mine: set[asyncio.Task] = set()
        try:
            while True:
                try:
                    msg = await read_message(reader)
                except (asyncio.IncompleteReadError, ConnectionError):
                    break
                except DecodeMalformed as exc:
                    log.warning("malformed frame from peer: %s", exc)
                    break
                task = asyncio.create_task(self._serve_one(msg, writer, lock))
                mine.add(task)
                self._tasks.add(task)
                task.add_done_callback(mine.discard)
                task.add_done_callback(self._tasks.discard)
        finally:
            if mine:
                await asyncio.gather(*mine, return_exceptions=True)
            self._writers.discard(writer)
            writer.close()
