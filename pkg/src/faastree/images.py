"""Sample function images for the process runtime.

An image is an executable that reads ``call_req`` frames on stdin and writes
``call_resp`` frames on stdout. The echo image sleeps for a configurable
time, then returns its payload; requests are served on threads so several
can be in flight inside one instance.
"""

from __future__ import annotations

import sys

_ECHO_TEMPLATE = '''#!{python}
import base64, json, struct, sys, threading, time

SLEEP_MS = {sleep_ms!r}
PER_KIB_MS = {per_kib_ms!r}
FAILURE_RATE = {failure_rate!r}

out = sys.stdout.buffer
lock = threading.Lock()


def send(body):
    data = json.dumps(body, separators=(",", ":")).encode()
    with lock:
        out.write(struct.pack(">I", len(data)) + data)
        out.flush()


def serve(req, fail):
    payload = base64.b64decode(req["payload_b64"])
    time.sleep((SLEEP_MS + PER_KIB_MS * len(payload) / 1024.0) / 1000.0)
    resp = {{"type": "call_resp", "call_id": req["call_id"], "cold_start": False,
            "queue_wait_ms": 0, "exec_ms": 0, "worker_id": ""}}
    if fail:
        resp.update(outcome="err", code="FUNCTION_ERROR", message="injected failure")
    else:
        resp.update(outcome="ok", payload_b64=req["payload_b64"])
    send(resp)


def main():
    inp = sys.stdin.buffer
    served = 0
    while True:
        header = inp.read(4)
        if len(header) < 4:
            return
        (length,) = struct.unpack(">I", header)
        req = json.loads(inp.read(length))
        if req.get("type") != "call_req":
            continue
        served += 1
        # Deterministic failure spacing: exactly FAILURE_RATE of calls fail.
        fail = int(served * FAILURE_RATE) > int((served - 1) * FAILURE_RATE)
        threading.Thread(target=serve, args=(req, fail), daemon=True).start()


if __name__ == "__main__":
    main()
'''


def echo_image(sleep_ms: float = 10.0, per_kib_ms: float = 0.0, failure_rate: float = 0.0) -> bytes:
    """Build a self-contained echo function image (a Python script)."""
    if not 0.0 <= failure_rate <= 1.0:
        raise ValueError("failure_rate must be within [0, 1]")
    return _ECHO_TEMPLATE.format(
        python=sys.executable,
        sleep_ms=float(sleep_ms),
        per_kib_ms=float(per_kib_ms),
        failure_rate=float(failure_rate),
    ).encode()


BUILTIN_IMAGES = {"echo": echo_image}


def builtin_image(spec: str) -> bytes:
    """Resolve ``builtin:echo`` or ``builtin:echo?sleep_ms=20&failure_rate=0.05``."""
    name, _, query = spec.removeprefix("builtin:").partition("?")
    if name not in BUILTIN_IMAGES:
        raise ValueError(f"unknown builtin image {name!r}")
    kwargs = {}
    for part in filter(None, query.split("&")):
        key, _, value = part.partition("=")
        kwargs[key] = float(value)
    return BUILTIN_IMAGES[name](**kwargs)
