"""Entry point of one spawned node process.

    python -m fedbed.node PROGRAM NODE_ID NO_NODES FL_SRV_ID BASE_PORT
        [--transport tcp] [--seed S] [--trace FILE] [--iters K] [--timeout SECS]

PROGRAM is a registered example name or ``module:function``. On success the
last stdout line is ``RESULT <canonical local data>`` and the exit code is 0;
on failure it is ``ERROR <ExceptionType>: <message>`` with exit code 1.
"""

from __future__ import annotations

import argparse
import sys

from fedbed import codec
from fedbed.errors import FedbedError
from fedbed.examples import resolve
from fedbed.traces import TraceRow, write_trace

RESULT_PREFIX = "RESULT "
ERROR_PREFIX = "ERROR "


def run_node(program, no_nodes, node_id, fl_srv_id=0, *, trace_path=None, no_iters=None, **node_opts):
    """Run one node of ``program`` and write its trace file (if requested)."""
    fn = resolve(program) if isinstance(program, str) else program
    rows = []

    def on_iter(k, ldata):
        rows.append(TraceRow(k, node_id, ldata))

    try:
        return fn(no_nodes, node_id, fl_srv_id, no_iters=no_iters, on_iter=on_iter, **node_opts)
    finally:
        if trace_path is not None:
            write_trace(trace_path, rows)


def build_parser():
    p = argparse.ArgumentParser(prog="python -m fedbed.node", description="Run one testbed node.")
    p.add_argument("program")
    p.add_argument("node_id", type=int)
    p.add_argument("no_nodes", type=int)
    p.add_argument("fl_srv_id", type=int)
    p.add_argument("base_port", type=int)
    p.add_argument("--transport", choices=["tcp", "sim"], default="tcp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--timeout", type=float, default=30.0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.transport == "sim":
        print(f"{ERROR_PREFIX}UsageError: the sim transport runs all nodes in the launcher process", flush=True)
        return 2
    try:
        ret = run_node(
            args.program,
            args.no_nodes,
            args.node_id,
            args.fl_srv_id,
            trace_path=args.trace,
            no_iters=args.iters,
            base_port=args.base_port,
            recv_timeout=args.timeout,
        )
        line = RESULT_PREFIX + codec.dumps_value(ret)
    except (FedbedError, Exception) as exc:
        print(f"{ERROR_PREFIX}{type(exc).__name__}: {exc}", flush=True)
        return 1
    print(line, flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
