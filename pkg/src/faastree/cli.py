"""Command line entry points: ``worker``, ``registry``, ``emu`` and ``bench``.

Exit codes: 0 on success, 2 for an invalid configuration, 3 when the
target cannot be reached.
"""

from __future__ import annotations

import asyncio
import json
import logging
import signal
import subprocess
import sys
from pathlib import Path
from typing import Any, Awaitable, Callable

import click

from faastree.errors import ConfigInvalid, FaasError, NotFound, TargetUnreachable, TransportError

EXIT_CONFIG_INVALID = 2
EXIT_UNREACHABLE = 3


def _run(main: Awaitable[Any]) -> Any:
    """Run a coroutine, translating well-known failures into exit codes."""
    try:
        return asyncio.run(main)
    except ConfigInvalid as exc:
        click.echo(f"error: invalid configuration: {exc}", err=True)
        sys.exit(EXIT_CONFIG_INVALID)
    except (TargetUnreachable, TransportError, ConnectionError) as exc:
        click.echo(f"error: target unreachable: {exc}", err=True)
        sys.exit(EXIT_UNREACHABLE)


def _guard(fn: Callable[[], Any]) -> Any:
    try:
        return fn()
    except ConfigInvalid as exc:
        click.echo(f"error: invalid configuration: {exc}", err=True)
        sys.exit(EXIT_CONFIG_INVALID)
    except (NotFound, FaasError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


async def _until_signalled() -> None:
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    try:
        await stop.wait()
    finally:
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.remove_signal_handler(sig)


def _load_profile(path: str):
    from faastree.bench.profile import LoadProfile

    try:
        return LoadProfile.load(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigInvalid(f"cannot load profile {path}: {exc}") from None


def _load_model(path: str):
    from faastree.emulator.model import WorkerModel

    try:
        return WorkerModel.load(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigInvalid(f"cannot load model {path}: {exc}") from None


def _logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


# -- worker -----------------------------------------------------------------


@click.command("worker")
@click.option("--listen", default="127.0.0.1:0", show_default=True, help="host:port to serve on.")
@click.option("--config-store", required=True, type=click.Path(file_okay=False), help="Config store root.")
@click.option("--image-store", required=True, type=click.Path(file_okay=False), help="Image store root.")
@click.option("--runtime", type=click.Choice(["process", "emulated"]), default="process", show_default=True)
@click.option("--model", type=click.Path(dir_okay=False), help="Model file for the emulated runtime.")
@click.option("--id", "worker_id", default=None, help="Worker id reported in responses.")
@click.option("--seed", default="0", show_default=True, help="Seed for emulated draws.")
@click.option("-v", "--verbose", is_flag=True)
def worker_cli(listen, config_store, image_store, runtime, model, worker_id, seed, verbose) -> None:
    """Run one worker node until interrupted."""
    _logging(verbose)
    _run(_serve_worker(listen, config_store, image_store, runtime, model, worker_id, seed))


async def _serve_worker(listen, config_store, image_store, runtime_kind, model, worker_id, seed) -> None:
    from faastree.registry import ConfigStore, ImageStore
    from faastree.transport import TcpServer
    from faastree.worker.node import Worker
    from faastree.worker.runtime import ProcessRuntime

    if runtime_kind == "emulated":
        from faastree.emulator.runtime import EmulatedRuntime

        if not model:
            raise ConfigInvalid("--runtime emulated needs --model")
        runtime = EmulatedRuntime(_load_model(model), seed=seed)
    else:
        runtime = ProcessRuntime()
    worker = Worker(worker_id or f"worker@{listen}", ConfigStore(config_store), runtime, ImageStore(image_store))
    await worker.start()
    server = await TcpServer(worker, listen).start()
    click.echo(server.address, nl=True)
    sys.stdout.flush()
    try:
        await _until_signalled()
    finally:
        await server.close()
        await worker.close(drain=True)
        if isinstance(runtime, ProcessRuntime):
            runtime.close()


# -- registry ---------------------------------------------------------------


@click.group("registry")
@click.option("--root", default="store", show_default=True, type=click.Path(file_okay=False), help="Store root.")
@click.pass_context
def registry_cli(ctx, root) -> None:
    """Content-addressed images and per-function configs."""
    ctx.obj = Path(root)


@registry_cli.command("put-image")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def put_image(root: Path, file: str) -> None:
    """Store FILE and print its digest."""
    from faastree.registry import ImageStore

    click.echo(_guard(lambda: ImageStore(root).put_image(Path(file).read_bytes())))


@registry_cli.command("put-config")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def put_config(root: Path, file: str) -> None:
    """Register the FunctionConfig in FILE."""
    from faastree.protocol import FunctionConfig
    from faastree.registry import ConfigStore

    def go() -> str:
        try:
            cfg = FunctionConfig.from_dict(json.loads(Path(file).read_text()))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigInvalid(str(exc)) from None
        ConfigStore(root).put_config(cfg)
        return cfg.function

    click.echo(_guard(go))


@registry_cli.command("get-config")
@click.argument("function")
@click.pass_obj
def get_config(root: Path, function: str) -> None:
    """Print the stored config of FUNCTION."""
    from faastree.registry import ConfigStore

    cfg = _guard(lambda: ConfigStore(root).get_config(function))
    click.echo(json.dumps(cfg.to_dict(), indent=2))


# -- emu --------------------------------------------------------------------


@click.group("emu")
def emu_cli() -> None:
    """Record traces, fit models, evaluate and serve emulated workers."""


@emu_cli.command("record")
@click.option("--target", required=True, help="Worker address host:port.")
@click.option("--profile", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--trace", required=True, type=click.Path(dir_okay=False))
@click.option("--config-store", type=click.Path(file_okay=False), help="Used to attribute in-flight counts.")
def emu_record(target, profile, trace, config_store) -> None:
    """Drive PROFILE against a worker and write a trace."""
    from faastree.emulator.record import record_trace
    from faastree.registry import ConfigStore

    configs = ConfigStore(config_store) if config_store else None
    load = _guard(lambda: _load_profile(profile))
    records = _run(record_trace(target, load, trace, configs))
    click.echo(f"{len(records)} records -> {trace}")


@emu_cli.command("fit")
@click.option("--trace", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--model", required=True, type=click.Path(dir_okay=False))
@click.option("--function", "functions", multiple=True, help="Restrict to these functions.")
def emu_fit(trace, model, functions) -> None:
    """Fit a model to TRACE."""
    from faastree.emulator.model import fit_model
    from faastree.emulator.trace import read_trace

    fitted = _guard(lambda: fit_model(read_trace(trace), functions or None))
    fitted.save(model)
    for name, fm in sorted(fitted.functions.items()):
        flag = " (low sample)" if fm.low_sample_warning else ""
        click.echo(f"{name}: n={fm.n_samples} sigma={fm.sigma_ms:.2f} cold+={fm.cold_extra_ms:.1f} fail={fm.failure_rate:.3f}{flag}")


@emu_cli.command("eval")
@click.option("--trace", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default="0", show_default=True)
@click.option("--config-store", type=click.Path(file_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Write the report as JSON.")
def emu_eval(trace, model, seed, config_store, out) -> None:
    """Replay TRACE on an emulated worker and report fidelity."""
    from faastree.emulator.evaluate import evaluate_model
    from faastree.emulator.trace import read_trace
    from faastree.registry import ConfigStore

    configs = ConfigStore(config_store) if config_store else None
    fitted = _guard(lambda: _load_model(model))
    rep = evaluate_model(fitted, read_trace(trace), seed=seed, configs=configs)
    text = json.dumps(rep.to_dict(), indent=2)
    if out:
        Path(out).write_text(text + "\n")
    click.echo(text)


@emu_cli.command("serve")
@click.option("--model", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--listen", default="127.0.0.1:0", show_default=True)
@click.option("--config-store", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default="0", show_default=True)
@click.option("--id", "worker_id", default=None)
def emu_serve(model, listen, config_store, seed, worker_id) -> None:
    """Serve an emulated worker until interrupted."""
    from faastree.registry import ConfigStore
    from faastree.transport import TcpServer
    from faastree.worker.node import Worker
    from faastree.emulator.runtime import EmulatedRuntime

    async def main() -> None:
        runtime = EmulatedRuntime(_load_model(model), seed=seed)
        worker = await Worker(worker_id or f"emu@{listen}", ConfigStore(config_store), runtime).start()
        server = await TcpServer(worker, listen).start()
        click.echo(server.address)
        sys.stdout.flush()
        try:
            await _until_signalled()
        finally:
            await server.close()
            await worker.close(drain=True)

    _run(main())


# -- bench ------------------------------------------------------------------


@click.group("bench")
def bench_cli() -> None:
    """Launch topologies, generate load and summarize results."""


@bench_cli.command("run")
@click.option("--config", required=True, type=click.Path(exists=True, dir_okay=False), help="Topology file.")
@click.option("--only", default=None, help="Launch just this node; its children must be reachable.")
@click.option("--spawn", is_flag=True, help="Run every node in its own process.")
@click.option("-v", "--verbose", is_flag=True)
def bench_run(config, only, spawn, verbose) -> None:
    """Launch the topology in CONFIG and print the root address."""
    from faastree.bench.topology import launch, load_topology

    _logging(verbose)
    topo = _guard(lambda: load_topology(config))
    if spawn:
        _spawn_all(config, topo)
        return

    async def main() -> None:
        running = await launch(topo, only=only)
        node_id = only or topo.root
        server = running.servers.get(node_id)
        click.echo(server.address if server else f"{node_id} (in-process, no listen address)")
        sys.stdout.flush()
        try:
            await _until_signalled()
        finally:
            await running.close()

    _run(main())


def _spawn_all(config: str, topo) -> None:
    from faastree.bench.topology import _postorder

    missing = [n for n, spec in topo.nodes.items() if spec.listen is None]
    if missing:
        click.echo(f"error: invalid configuration: --spawn needs 'listen' on {missing}", err=True)
        sys.exit(EXIT_CONFIG_INVALID)
    procs: list[subprocess.Popen] = []
    try:
        for node_id in _postorder(topo):
            proc = subprocess.Popen(
                [sys.executable, "-m", "faastree.cli", "bench", "run", "--config", config, "--only", node_id],
                stdout=subprocess.PIPE,
                text=True,
            )
            procs.append(proc)
            line = proc.stdout.readline().strip()
            if not line or proc.poll() is not None:
                click.echo(f"error: node {node_id} failed to start", err=True)
                sys.exit(1)
        click.echo(topo.nodes[topo.root].listen)
        sys.stdout.flush()
        signal.signal(signal.SIGTERM, signal.default_int_handler)
        procs[-1].wait()
    except KeyboardInterrupt:
        pass
    finally:
        for proc in reversed(procs):
            if proc.poll() is None:
                proc.send_signal(signal.SIGTERM)
                try:
                    proc.wait(timeout=10)
                except subprocess.TimeoutExpired:
                    proc.kill()


@bench_cli.command("load")
@click.option("--target", required=True, help="Node address host:port.")
@click.option("--profile", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Results CSV.")
def bench_load(target, profile, out) -> None:
    """Run PROFILE against TARGET and write one CSV row per call."""
    from faastree.bench.generate import generate

    async def main() -> int:
        from faastree.transport import RemoteNode

        node = RemoteNode(target)
        try:
            return len(await generate(node, _load_profile(profile), out))
        finally:
            await node.close()

    click.echo(f"{_run(main())} rows -> {out}")


@bench_cli.command("report")
@click.option("--in", "source", required=True, type=click.Path(exists=True, dir_okay=False), help="Results CSV.")
@click.option("--summary", type=click.Path(dir_okay=False), help="Summary JSON path (default: <csv>.summary.json).")
def bench_report(source, summary) -> None:
    """Print a latency table for a results CSV."""
    from faastree.bench.report import render_table, report, write_summary

    try:
        rep = report(source)
    except (ValueError, KeyError) as exc:
        raise click.ClickException(str(exc)) from None
    write_summary(rep, summary or f"{source}.summary.json")
    click.echo(render_table(rep))


# -- umbrella ---------------------------------------------------------------


@click.group("faastree")
def main() -> None:
    """Tree-structured FaaS platform toolkit."""


main.add_command(worker_cli)
main.add_command(registry_cli)
main.add_command(emu_cli)
main.add_command(bench_cli)


if __name__ == "__main__":
    main()
