"""Spawn a whole run, collect per-node outcomes and traces, build the report."""

from __future__ import annotations

import logging
import os
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import fedbed
from fedbed import codec
from fedbed.errors import ConfigError, DecodeError, LaunchError, TraceFormatError
from fedbed.examples import EXAMPLES, resolve
from fedbed.node import ERROR_PREFIX, RESULT_PREFIX, run_node
from fedbed.traces import (
    ConvergenceResult,
    TraceRow,
    convergence_point,
    format_trace,
    is_model_trace,
    merge_traces,
)
from fedbed.transport import DEFAULT_BASE_PORT, DeliveryPolicy, SimNetwork, check_topology

log = logging.getLogger(__name__)

MERGED_TRACE = "trace.csv"


def trace_file(trace_dir, node_id) -> Path:
    return Path(trace_dir) / f"trace_{node_id}.csv"


@dataclass
class LaunchSpec:
    no_nodes: int
    example: str
    fl_srv_id: int = 0
    base_port: int = DEFAULT_BASE_PORT
    transport: str = "tcp"
    seed: int = 0
    policy: str = DeliveryPolicy.SEEDED_SHUFFLE.value
    no_iters: int | None = None
    trace_dir: str | os.PathLike = "."
    timeout: float = 30.0
    verbose: bool = False
    # fault injection: node ids that are never started
    absent: tuple[int, ...] = ()
    # children still alive after this many seconds are killed (default 10 x timeout)
    wall_limit: float | None = None

    def validate(self) -> None:
        if type(self.no_nodes) is not int or self.no_nodes < 2:
            raise LaunchError(f"--nodes must be >= 2, got {self.no_nodes}")
        try:
            check_topology(self.fl_srv_id, self.no_nodes, self.base_port)
        except ConfigError as exc:
            raise LaunchError(str(exc)) from exc
        if self.transport not in ("tcp", "sim"):
            raise LaunchError(f"unknown transport {self.transport!r}")
        try:
            DeliveryPolicy(self.policy)
        except ValueError:
            raise LaunchError(f"unknown delivery policy {self.policy!r}") from None
        if self.no_iters is not None and self.no_iters < 1:
            raise LaunchError("--iters must be >= 1")
        if not self.timeout > 0:
            raise LaunchError("--timeout must be positive")
        for a in self.absent:
            if not 0 <= a < self.no_nodes:
                raise LaunchError(f"absent node {a} not in [0, {self.no_nodes})")
        if self.transport == "tcp" and self.example not in EXAMPLES and ":" not in self.example:
            raise LaunchError(f"unknown example {self.example!r}")
        resolve(self.example)
        try:
            Path(self.trace_dir).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise LaunchError(f"trace directory {self.trace_dir}: {exc}") from exc
        if not os.access(self.trace_dir, os.W_OK):
            raise LaunchError(f"trace directory {self.trace_dir} is not writable")


@dataclass
class NodeOutcome:
    node_id: int
    status: str  # ok | failed | timeout | absent
    result: Any = None
    error: str | None = None
    exit_code: int | None = None
    output: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class RunReport:
    spec: LaunchSpec
    nodes: list[NodeOutcome]
    trace: list[TraceRow]
    trace_path: Path | None
    duration: float
    convergence: ConvergenceResult | None = None

    @property
    def ok(self) -> bool:
        return len(self.nodes) == self.spec.no_nodes and all(n.ok for n in self.nodes)

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 1

    def results(self) -> list:
        return [n.result for n in self.nodes]

    def format(self) -> str:
        lines = []
        for n in self.nodes:
            if n.ok:
                lines.append(f"node {n.node_id}: ok result={codec.dumps_value(n.result)}")
            else:
                code = "" if n.exit_code is None else f" (exit {n.exit_code})"
                lines.append(f"node {n.node_id}: {n.status}{code} {n.error or ''}".rstrip())
        lines.append(
            f"status={'ok' if self.ok else 'failed'} nodes={self.spec.no_nodes} "
            f"transport={self.spec.transport} duration={self.duration:.3f}s"
        )
        if self.trace_path is not None:
            lines.append(f"trace={self.trace_path}")
        if self.convergence is not None:
            lines.append(self.convergence.summary())
        return "\n".join(lines)


def _child_env():
    env = dict(os.environ)
    src = str(Path(fedbed.__file__).resolve().parent.parent)
    env["PYTHONPATH"] = os.pathsep.join(p for p in (src, env.get("PYTHONPATH")) if p)
    env["PYTHONUNBUFFERED"] = "1"
    return env


def _pump(proc, node_id, sink, verbose):
    for line in proc.stdout:
        line = line.rstrip("\n")
        sink.append(line)
        if verbose:
            print(f"[node {node_id}] {line}", flush=True)


def _parse_child(node_id, code, lines) -> NodeOutcome:
    out = NodeOutcome(node_id, "failed", exit_code=code, output=lines)
    errors = [ln[len(ERROR_PREFIX):] for ln in lines if ln.startswith(ERROR_PREFIX)]
    results = [ln[len(RESULT_PREFIX):] for ln in lines if ln.startswith(RESULT_PREFIX)]
    if code == 0 and results:
        try:
            out.result = codec.loads_value(results[-1])
            out.status = "ok"
        except DecodeError as exc:
            out.error = f"undecodable result: {exc}"
    elif errors:
        out.error = errors[-1]
    elif code is None:
        out.status = "timeout"
        out.error = "killed after the wall-clock limit"
    else:
        out.error = (lines[-1] if lines else "") or "no output"
    return out


def _run_tcp(spec: LaunchSpec) -> list[NodeOutcome]:
    procs: dict[int, subprocess.Popen] = {}
    outputs: dict[int, list[str]] = {}
    pumps = []
    env = _child_env()
    try:
        for i in range(spec.no_nodes):
            if i in spec.absent:
                continue
            argv = [
                sys.executable, "-m", "fedbed.node",
                spec.example, str(i), str(spec.no_nodes), str(spec.fl_srv_id), str(spec.base_port),
                "--transport", "tcp",
                "--seed", str(spec.seed),
                "--trace", str(trace_file(spec.trace_dir, i)),
                "--timeout", repr(float(spec.timeout)),
            ]
            if spec.no_iters is not None:
                argv += ["--iters", str(spec.no_iters)]
            procs[i] = subprocess.Popen(
                argv,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
                stdin=subprocess.DEVNULL,
                text=True,
                env=env,
            )
            outputs[i] = []
            t = threading.Thread(target=_pump, args=(procs[i], i, outputs[i], spec.verbose), daemon=True)
            t.start()
            pumps.append(t)
    except OSError as exc:
        for p in procs.values():
            p.kill()
        raise LaunchError(f"cannot spawn node process: {exc}") from exc

    limit = spec.wall_limit if spec.wall_limit is not None else 10 * spec.timeout
    deadline = time.monotonic() + limit
    codes: dict[int, int | None] = {}
    for i, p in procs.items():
        try:
            codes[i] = p.wait(timeout=max(deadline - time.monotonic(), 0.01))
        except subprocess.TimeoutExpired:
            p.kill()
            p.wait()
            codes[i] = None
    for t in pumps:
        t.join(timeout=5)

    outcomes = []
    for i in range(spec.no_nodes):
        if i in spec.absent:
            outcomes.append(NodeOutcome(i, "absent", error="not started (fault injection)"))
        else:
            outcomes.append(_parse_child(i, codes[i], outputs[i]))
    return outcomes


def _run_sim(spec: LaunchSpec) -> tuple[list[NodeOutcome], SimNetwork]:
    net = SimNetwork(spec.no_nodes, spec.policy, spec.seed, connect_budget=spec.timeout)
    started = [i for i in range(spec.no_nodes) if i not in spec.absent]
    for i in started:
        net.spawn(
            run_node,
            spec.example,
            spec.no_nodes,
            i,
            spec.fl_srv_id,
            trace_path=trace_file(spec.trace_dir, i),
            no_iters=spec.no_iters,
            network=net,
            recv_timeout=spec.timeout,
            name=f"node-{i}",
        )
    by_id = dict(zip(started, net.run()))
    outcomes = []
    for i in range(spec.no_nodes):
        if i not in by_id:
            outcomes.append(NodeOutcome(i, "absent", error="not started (fault injection)"))
            continue
        o = by_id[i]
        if o.ok:
            outcomes.append(NodeOutcome(i, "ok", result=o.result, exit_code=0))
        else:
            err = f"{type(o.error).__name__}: {o.error}"
            if spec.verbose:
                print(f"[node {i}] {ERROR_PREFIX}{err}", flush=True)
            outcomes.append(NodeOutcome(i, "failed", error=err, exit_code=1))
    return outcomes, net


def launch(spec: LaunchSpec) -> RunReport:
    """Run every node of ``spec`` to completion and summarise the run."""
    spec.validate()
    for i in range(spec.no_nodes):
        trace_file(spec.trace_dir, i).unlink(missing_ok=True)
    start = time.monotonic()
    if spec.transport == "tcp":
        nodes = _run_tcp(spec)
    else:
        nodes, _ = _run_sim(spec)
    duration = time.monotonic() - start

    files = [f for f in (trace_file(spec.trace_dir, i) for i in range(spec.no_nodes)) if f.exists()]
    trace: list[TraceRow] = []
    trace_path = None
    if files:
        try:
            trace = merge_traces(files)
        except TraceFormatError as exc:
            log.warning("cannot merge traces: %s", exc)
        else:
            trace_path = Path(spec.trace_dir) / MERGED_TRACE
            trace_path.write_text(format_trace(trace), encoding="utf-8")

    report = RunReport(spec, nodes, trace, trace_path, duration)
    if report.ok and trace and is_model_trace(trace):
        try:
            report.convergence = convergence_point(trace)
        except TraceFormatError as exc:
            log.warning("no convergence summary: %s", exc)
    return report
