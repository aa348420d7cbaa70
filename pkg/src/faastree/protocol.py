"""Domain types and the length-prefixed wire format.

Every node in a tree (balancer, leaf, worker) speaks the same six messages:
``call_req``/``call_resp``, ``state_req``/``state_resp`` and
``stop_req``/``stop_resp``. A frame is a 4-byte big-endian length followed by
a UTF-8 JSON object carrying a ``type`` field. Payload bytes travel base64
encoded in ``payload_b64``.
"""

from __future__ import annotations

import base64
import binascii
import json
import re
import secrets
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

from faastree.errors import DecodeMalformed, EncodeTooLarge

HEADER = struct.Struct(">I")
MAX_PAYLOAD = 8 * 1024 * 1024
MAX_FRAME = 16 * 1024 * 1024

_FUNCTION_RE = re.compile(r"[a-z0-9-]+")
_DIGEST_RE = re.compile(r"[0-9a-f]{64}")
_CALL_ID_RE = re.compile(r"[0-9a-f]{32}")


def validate_function_id(name: str) -> str:
    """Return ``name`` if it is a valid function id, else raise ValueError."""
    if not isinstance(name, str) or not _FUNCTION_RE.fullmatch(name):
        raise ValueError(f"invalid function id {name!r}: must match [a-z0-9-]+")
    if len(name.encode()) > 128:
        raise ValueError(f"function id longer than 128 bytes: {name[:20]}...")
    return name


def validate_digest(digest: str) -> str:
    if not isinstance(digest, str) or not _DIGEST_RE.fullmatch(digest):
        raise ValueError(f"invalid image digest {digest!r}: need 64 lowercase hex chars")
    return digest


def new_call_id() -> str:
    return secrets.token_hex(16)


class ErrorCode(str, Enum):
    NOT_FOUND = "NOT_FOUND"
    DEADLINE_EXCEEDED = "DEADLINE_EXCEEDED"
    OVERLOADED = "OVERLOADED"
    INSTANCE_START_FAILED = "INSTANCE_START_FAILED"
    FUNCTION_ERROR = "FUNCTION_ERROR"
    TRANSPORT_ERROR = "TRANSPORT_ERROR"


# -- concurrency modes -------------------------------------------------------


@dataclass(frozen=True)
class Single:
    """At most one request per instance."""

    @property
    def limit(self) -> int:
        return 1


@dataclass(frozen=True)
class HardLimit:
    c: int

    def __post_init__(self) -> None:
        if not isinstance(self.c, int) or isinstance(self.c, bool) or self.c < 1:
            raise ValueError(f"hard limit must be a positive integer, got {self.c!r}")

    @property
    def limit(self) -> int:
        return self.c


@dataclass(frozen=True)
class Unlimited:
    """No per-instance cap; replicas are added when utilization stays high."""

    util_threshold: float
    check_interval_ms: int

    def __post_init__(self) -> None:
        if not 0 < self.util_threshold <= 1:
            raise ValueError(f"util_threshold must be in (0, 1], got {self.util_threshold}")
        if self.check_interval_ms < 1:
            raise ValueError("check_interval_ms must be positive")

    @property
    def limit(self) -> float:
        return float("inf")


ConcurrencyMode = Union[Single, HardLimit, Unlimited]


def mode_to_dict(mode: ConcurrencyMode) -> dict[str, Any]:
    if isinstance(mode, Single):
        return {"mode": "single"}
    if isinstance(mode, HardLimit):
        return {"mode": "hard_limit", "limit": mode.c}
    return {
        "mode": "unlimited",
        "util_threshold": mode.util_threshold,
        "check_interval_ms": mode.check_interval_ms,
    }


def mode_from_dict(data: dict[str, Any]) -> ConcurrencyMode:
    kind = data.get("mode")
    if kind == "single":
        return Single()
    if kind == "hard_limit":
        return HardLimit(_int(data, "limit"))
    if kind == "unlimited":
        return Unlimited(float(data["util_threshold"]), _int(data, "check_interval_ms"))
    raise ValueError(f"unknown concurrency mode {kind!r}")


@dataclass(frozen=True)
class FunctionConfig:
    function: str
    image_digest: str
    memory_limit_mb: int = 128
    cpu_millis: int = 1000
    concurrency: ConcurrencyMode = field(default_factory=Single)
    idle_timeout_ms: int = 60_000
    exec_deadline_ms: int = 30_000

    def __post_init__(self) -> None:
        validate_function_id(self.function)
        validate_digest(self.image_digest)
        for name in ("memory_limit_mb", "cpu_millis", "idle_timeout_ms", "exec_deadline_ms"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "function": self.function,
            "image_digest": self.image_digest,
            "memory_limit_mb": self.memory_limit_mb,
            "cpu_millis": self.cpu_millis,
            "concurrency": mode_to_dict(self.concurrency),
            "idle_timeout_ms": self.idle_timeout_ms,
            "exec_deadline_ms": self.exec_deadline_ms,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FunctionConfig:
        return cls(
            function=data["function"],
            image_digest=data["image_digest"],
            memory_limit_mb=_int(data, "memory_limit_mb"),
            cpu_millis=_int(data, "cpu_millis"),
            concurrency=mode_from_dict(data["concurrency"]),
            idle_timeout_ms=_int(data, "idle_timeout_ms"),
            exec_deadline_ms=_int(data, "exec_deadline_ms"),
        )


# -- wire messages -------------------------------------------------------------


@dataclass(frozen=True)
class CallRequest:
    call_id: str
    function: str
    payload: bytes = b""
    deadline_ms: int = 30_000

    def __post_init__(self) -> None:
        if not _CALL_ID_RE.fullmatch(self.call_id):
            raise ValueError(f"call_id must be 32 lowercase hex chars, got {self.call_id!r}")
        validate_function_id(self.function)
        if self.deadline_ms < 1:
            raise ValueError("deadline_ms must be positive")

    @classmethod
    def new(cls, function: str, payload: bytes = b"", deadline_ms: int = 30_000) -> CallRequest:
        return cls(new_call_id(), function, payload, deadline_ms)


@dataclass(frozen=True)
class Ok:
    payload: bytes = b""


@dataclass(frozen=True)
class Err:
    code: ErrorCode
    message: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "code", ErrorCode(self.code))


Outcome = Union[Ok, Err]


@dataclass(frozen=True)
class CallResponse:
    call_id: str
    outcome: Outcome
    cold_start: bool = False
    queue_wait_ms: int = 0
    exec_ms: int = 0
    worker_id: str = ""

    @property
    def ok(self) -> bool:
        return isinstance(self.outcome, Ok)

    @property
    def code(self) -> ErrorCode | None:
        return self.outcome.code if isinstance(self.outcome, Err) else None

    @classmethod
    def error(cls, call_id: str, code: ErrorCode, message: str = "", worker_id: str = "") -> CallResponse:
        return cls(call_id, Err(code, message), worker_id=worker_id)


@dataclass(frozen=True)
class StateRequest:
    worker_id: str = ""


@dataclass(frozen=True)
class InstanceInfo:
    instance_id: str
    function: str
    status: str  # "starting" | "idle" | "busy"
    in_flight: int
    started_at_ms: int

    def __post_init__(self) -> None:
        if self.status not in ("starting", "idle", "busy"):
            raise ValueError(f"bad instance status {self.status!r}")
        if self.in_flight < 0:
            raise ValueError("in_flight must be non-negative")


@dataclass(frozen=True)
class WorkerSnapshot:
    worker_id: str
    taken_at_ms: int
    instances: tuple[InstanceInfo, ...] = ()
    utilization: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))
        if not 0.0 <= self.utilization <= 1.0:
            raise ValueError("utilization must be within [0, 1]")

    @property
    def total_in_flight(self) -> int:
        return sum(i.in_flight for i in self.instances)

    def for_function(self, function: str) -> list[InstanceInfo]:
        return [i for i in self.instances if i.function == function]


@dataclass(frozen=True)
class StopRequest:
    """Stop one instance (``instance_id``) or every instance of ``function``."""

    worker_id: str = ""
    function: str | None = None
    instance_id: str | None = None

    def __post_init__(self) -> None:
        if (self.function is None) == (self.instance_id is None):
            raise ValueError("stop_req needs exactly one of function or instance_id")
        if self.function is not None:
            validate_function_id(self.function)


@dataclass(frozen=True)
class StopResponse:
    worker_id: str
    outcome: Outcome = Ok()

    @property
    def ok(self) -> bool:
        return isinstance(self.outcome, Ok)


Message = Union[CallRequest, CallResponse, StateRequest, WorkerSnapshot, StopRequest, StopResponse]


# -- encoding ------------------------------------------------------------------


def _b64(data: bytes) -> str:
    if len(data) > MAX_PAYLOAD:
        raise EncodeTooLarge(f"payload of {len(data)} bytes exceeds {MAX_PAYLOAD}")
    return base64.b64encode(data).decode("ascii")


def _outcome_fields(outcome: Outcome, with_payload: bool) -> dict[str, Any]:
    if isinstance(outcome, Ok):
        body: dict[str, Any] = {"outcome": "ok"}
        if with_payload:
            body["payload_b64"] = _b64(outcome.payload)
        return body
    return {"outcome": "err", "code": outcome.code.value, "message": outcome.message}


def message_to_dict(msg: Message) -> dict[str, Any]:
    if isinstance(msg, CallRequest):
        return {
            "type": "call_req",
            "call_id": msg.call_id,
            "function": msg.function,
            "payload_b64": _b64(msg.payload),
            "deadline_ms": msg.deadline_ms,
        }
    if isinstance(msg, CallResponse):
        return {
            "type": "call_resp",
            "call_id": msg.call_id,
            **_outcome_fields(msg.outcome, with_payload=True),
            "cold_start": msg.cold_start,
            "queue_wait_ms": msg.queue_wait_ms,
            "exec_ms": msg.exec_ms,
            "worker_id": msg.worker_id,
        }
    if isinstance(msg, StateRequest):
        return {"type": "state_req", "worker_id": msg.worker_id}
    if isinstance(msg, WorkerSnapshot):
        return {
            "type": "state_resp",
            "worker_id": msg.worker_id,
            "taken_at_ms": msg.taken_at_ms,
            "instances": [
                {
                    "instance_id": i.instance_id,
                    "function": i.function,
                    "status": i.status,
                    "in_flight": i.in_flight,
                    "started_at_ms": i.started_at_ms,
                }
                for i in msg.instances
            ],
            "utilization": msg.utilization,
        }
    if isinstance(msg, StopRequest):
        body = {"type": "stop_req", "worker_id": msg.worker_id}
        if msg.function is not None:
            body["function"] = msg.function
        else:
            body["instance_id"] = msg.instance_id
        return body
    if isinstance(msg, StopResponse):
        return {
            "type": "stop_resp",
            "worker_id": msg.worker_id,
            **_outcome_fields(msg.outcome, with_payload=False),
        }
    raise TypeError(f"not a wire message: {type(msg).__name__}")


def encode_message(msg: Message) -> bytes:
    body = json.dumps(message_to_dict(msg), separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise EncodeTooLarge(f"frame body of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def _int(body: dict[str, Any], key: str, minimum: int = 0) -> int:
    value = body.get(key)
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise ValueError(f"field {key!r} must be an integer >= {minimum}, got {value!r}")
    return value


def _str(body: dict[str, Any], key: str) -> str:
    value = body.get(key)
    if not isinstance(value, str):
        raise ValueError(f"field {key!r} must be a string")
    return value


def _bool(body: dict[str, Any], key: str) -> bool:
    value = body.get(key)
    if not isinstance(value, bool):
        raise ValueError(f"field {key!r} must be a boolean")
    return value


def _payload(body: dict[str, Any]) -> bytes:
    try:
        data = base64.b64decode(_str(body, "payload_b64"), validate=True)
    except binascii.Error as exc:
        raise ValueError(f"bad base64 payload: {exc}") from None
    if len(data) > MAX_PAYLOAD:
        raise ValueError("payload exceeds 8 MiB")
    return data


def _outcome(body: dict[str, Any], with_payload: bool) -> Outcome:
    kind = body.get("outcome")
    if kind == "ok":
        return Ok(_payload(body)) if with_payload else Ok()
    if kind == "err":
        return Err(ErrorCode(_str(body, "code")), _str(body, "message"))
    raise ValueError(f"bad outcome {kind!r}")


def message_from_dict(body: dict[str, Any]) -> Message:
    kind = body.get("type")
    if kind == "call_req":
        return CallRequest(
            _str(body, "call_id"), _str(body, "function"), _payload(body), _int(body, "deadline_ms", 1)
        )
    if kind == "call_resp":
        return CallResponse(
            call_id=_str(body, "call_id"),
            outcome=_outcome(body, with_payload=True),
            cold_start=_bool(body, "cold_start"),
            queue_wait_ms=_int(body, "queue_wait_ms"),
            exec_ms=_int(body, "exec_ms"),
            worker_id=_str(body, "worker_id"),
        )
    if kind == "state_req":
        return StateRequest(_str(body, "worker_id"))
    if kind == "state_resp":
        raw = body.get("instances")
        if not isinstance(raw, list):
            raise ValueError("instances must be a list")
        util = body.get("utilization")
        if not isinstance(util, (int, float)) or isinstance(util, bool):
            raise ValueError("utilization must be a number")
        return WorkerSnapshot(
            worker_id=_str(body, "worker_id"),
            taken_at_ms=_int(body, "taken_at_ms"),
            instances=tuple(
                InstanceInfo(
                    _str(i, "instance_id"),
                    validate_function_id(_str(i, "function")),
                    _str(i, "status"),
                    _int(i, "in_flight"),
                    _int(i, "started_at_ms"),
                )
                for i in raw
            ),
            utilization=float(util),
        )
    if kind == "stop_req":
        return StopRequest(_str(body, "worker_id"), body.get("function"), body.get("instance_id"))
    if kind == "stop_resp":
        return StopResponse(_str(body, "worker_id"), _outcome(body, with_payload=False))
    raise ValueError(f"unknown message type {kind!r}")


def decode_message(data: bytes | bytearray | memoryview) -> tuple[Message, int] | None:
    """Decode the first frame in ``data``.

    Returns ``(message, bytes_consumed)``, or None when ``data`` does not yet
    hold a complete frame. Trailing bytes are left for the next call.
    """
    if len(data) < HEADER.size:
        return None
    (length,) = HEADER.unpack_from(data)
    if length > MAX_FRAME:
        raise DecodeMalformed(f"frame length {length} exceeds {MAX_FRAME}")
    end = HEADER.size + length
    if len(data) < end:
        return None
    try:
        body = json.loads(bytes(data[HEADER.size:end]).decode("utf-8"))
        if not isinstance(body, dict):
            raise ValueError("frame body is not an object")
        return message_from_dict(body), end
    except (ValueError, KeyError, TypeError) as exc:
        raise DecodeMalformed(str(exc)) from None
