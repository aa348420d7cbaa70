from __future__ import annotations

import json
import random
import signal
import socket
import subprocess
import sys

import pytest
from click.testing import CliRunner

from faastree.bench.generate import read_results, write_results
from faastree.cli import bench_cli, emu_cli, main, registry_cli
from faastree.emulator.model import WorkerModel
from faastree.emulator.trace import TraceRecord, write_trace

from test_bench import row


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def cli(*args, command=main):
    return CliRunner().invoke(command, [str(a) for a in args], catch_exceptions=False)


# -- registry -----------------------------------------------------------------------


def test_registry_round_trip(tmp_path):
    image = tmp_path / "img.py"
    image.write_bytes(b"print('hi')\n")
    put = cli("--root", tmp_path / "store", "put-image", image, command=registry_cli)
    assert put.exit_code == 0
    digest = put.output.strip()
    assert len(digest) == 64

    cfg = {"function": "hello", "image_digest": digest, "memory_limit_mb": 64, "cpu_millis": 500,
           "concurrency": {"mode": "single"}, "idle_timeout_ms": 1000, "exec_deadline_ms": 2000}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert cli("--root", tmp_path / "store", "put-config", tmp_path / "cfg.json", command=registry_cli).exit_code == 0
    got = cli("--root", tmp_path / "store", "get-config", "hello", command=registry_cli)
    assert got.exit_code == 0 and json.loads(got.output) == cfg


def test_registry_errors(tmp_path):
    missing = cli("registry", "--root", tmp_path, "get-config", "nobody")
    assert missing.exit_code == 1 and "error" in missing.output
    (tmp_path / "bad.json").write_text('{"function": "x"}')
    assert cli("registry", "--root", tmp_path, "put-config", tmp_path / "bad.json").exit_code == 2


# -- emu ----------------------------------------------------------------------------


@pytest.fixture
def trace_file(tmp_path):
    rng = random.Random(0)
    records = [
        TraceRecord(i * 20.0, "f", 1024 * k, 0, 0, 10 + 2 * k, False, True, 0.1)
        for i, k in enumerate(rng.randrange(4) for _ in range(60))
    ]
    path = tmp_path / "trace.csv"
    write_trace(path, records)
    return path


def test_emu_fit_and_eval(tmp_path, trace_file):
    model = tmp_path / "model.json"
    fit = cli("fit", "--trace", trace_file, "--model", model, command=emu_cli)
    assert fit.exit_code == 0 and "f: n=60" in fit.output
    assert WorkerModel.load(model).get("f").beta[0] == pytest.approx(10)
    assert WorkerModel.load(model).get("f").beta[2] == pytest.approx(2)

    out = tmp_path / "report.json"
    ev = cli("eval", "--trace", trace_file, "--model", model, "--seed", "2", "--out", out, command=emu_cli)
    assert ev.exit_code == 0
    data = json.loads(out.read_text())
    assert data["functions"]["f"]["ks_statistic"] < 0.05


def test_emu_fit_insufficient_data(tmp_path, trace_file):
    result = cli("emu", "fit", "--trace", trace_file, "--model", tmp_path / "m.json", "--function", "g")
    assert result.exit_code != 0 and "g" in result.output


def test_emu_bad_model_file(tmp_path, trace_file):
    bad = tmp_path / "m.json"
    bad.write_text("[]")
    assert cli("emu", "eval", "--trace", trace_file, "--model", bad).exit_code == 2


def test_emu_record_unreachable(tmp_path):
    profile = tmp_path / "p.json"
    profile.write_text(json.dumps({"phases": [{"function": "f", "pattern": {"kind": "closed_loop", "workers": 1, "calls_per_worker": 1}}]}))
    result = cli("emu", "record", "--target", "127.0.0.1:1", "--profile", profile, "--trace", tmp_path / "t.csv")
    assert result.exit_code == 3
    assert (tmp_path / "t.csv.invalid").exists()


# -- bench --------------------------------------------------------------------------


def test_bench_report(tmp_path):
    csv_path = tmp_path / "r.csv"
    write_results(csv_path, [row(1), row(2), row(3, code="OVERLOADED")])
    result = cli("report", "--in", csv_path, command=bench_cli)
    assert result.exit_code == 0
    assert "OVERLOADED:1" in result.output and "(all)" in result.output
    summary = json.loads((tmp_path / "r.csv.summary.json").read_text())
    assert summary["overall"]["p50"] == 2


def test_bench_load_unreachable(tmp_path):
    profile = tmp_path / "p.json"
    profile.write_text(json.dumps({"phases": [{"function": "f", "pattern": {"kind": "closed_loop", "workers": 1, "calls_per_worker": 1}}]}))
    result = cli("bench", "load", "--target", "127.0.0.1:1", "--profile", profile, "--out", tmp_path / "o.csv")
    assert result.exit_code == 3


def test_bench_load_bad_profile(tmp_path):
    profile = tmp_path / "p.json"
    profile.write_text('{"phases": []}')
    result = cli("bench", "load", "--target", "127.0.0.1:1", "--profile", profile, "--out", tmp_path / "o.csv")
    assert result.exit_code == 2


def test_bench_run_invalid_topology(tmp_path):
    config = tmp_path / "t.json"
    config.write_text(json.dumps({"functions": [], "nodes": [{"id": "a", "kind": "leaf", "children": ["a"]}]}))
    assert cli("bench", "run", "--config", config).exit_code == 2


def _topology(tmp_path, *, spawn: bool) -> tuple:
    leaf_port, worker_port = free_port(), free_port()
    config = tmp_path / "topo.json"
    config.write_text(
        json.dumps(
            {
                "stores": {"image_root": "images", "config_root": "configs"},
                "functions": [{"function": "echo", "image": "builtin:echo", "concurrency": {"mode": "hard_limit", "limit": 2}}],
                "nodes": [
                    {"id": "leaf", "kind": "leaf", "strategy": "warm_first", "children": ["w"], "listen": f"127.0.0.1:{leaf_port}"},
                    {"id": "w", "kind": "worker", "runtime": "process",
                     **({"listen": f"127.0.0.1:{worker_port}"} if spawn else {})},
                ],
            }
        )
    )
    return config, f"127.0.0.1:{leaf_port}"


@pytest.mark.parametrize("spawn", [False, True], ids=["in-process", "spawned"])
def test_bench_run_load_and_shutdown(tmp_path, spawn):
    config, address = _topology(tmp_path, spawn=spawn)
    args = [sys.executable, "-m", "faastree.cli", "bench", "run", "--config", str(config)] + (["--spawn"] if spawn else [])
    proc = subprocess.Popen(args, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        assert proc.stdout.readline().strip() == address
        profile = tmp_path / "p.json"
        profile.write_text(json.dumps({"phases": [{"function": "echo", "payload_bytes": 16, "pattern": {"kind": "closed_loop", "workers": 2, "calls_per_worker": 10}}]}))
        load = cli("bench", "load", "--target", address, "--profile", profile, "--out", tmp_path / "out.csv")
        assert load.exit_code == 0, load.output
        rows = read_results(tmp_path / "out.csv")
        assert len(rows) == 20 and all(r.ok and r.worker_id == "w" for r in rows)
    finally:
        proc.send_signal(signal.SIGINT)
        rc = proc.wait(timeout=30)
    assert rc == 0, proc.stderr.read()


def test_emu_serve_answers_calls(tmp_path):
    WorkerModel.constant({"echo": 2.0}).save(tmp_path / "model.json")
    configs = tmp_path / "configs"
    (tmp_path / "cfg.json").write_text(json.dumps(
        {"function": "echo", "image_digest": "a" * 64, "memory_limit_mb": 128, "cpu_millis": 1000,
         "concurrency": {"mode": "single"}, "idle_timeout_ms": 60000, "exec_deadline_ms": 30000}
    ))
    assert cli("registry", "--root", configs, "put-config", tmp_path / "cfg.json").exit_code == 0
    args = [sys.executable, "-m", "faastree.cli", "emu", "serve", "--model", str(tmp_path / "model.json"),
            "--config-store", str(configs), "--id", "emu1"]
    proc = subprocess.Popen(args, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        address = proc.stdout.readline().strip()
        profile = tmp_path / "p.json"
        profile.write_text(json.dumps({"phases": [{"function": "echo", "pattern": {"kind": "closed_loop", "workers": 1, "calls_per_worker": 5}}]}))
        assert cli("bench", "load", "--target", address, "--profile", profile, "--out", tmp_path / "o.csv").exit_code == 0
        rows = read_results(tmp_path / "o.csv")
        assert [r.worker_id for r in rows] == ["emu1"] * 5 and all(r.ok for r in rows)
        assert [r.exec_ms for r in rows] == [2] * 5
    finally:
        proc.send_signal(signal.SIGTERM)
        rc = proc.wait(timeout=30)
    assert rc == 0, proc.stderr.read()
