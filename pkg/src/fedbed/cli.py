"""``fedbed`` command line."""

from __future__ import annotations

import argparse
import logging
import sys

from fedbed.errors import LaunchError, TraceFormatError
from fedbed.launcher import LaunchSpec, launch
from fedbed.traces import DEFAULT_TOLERANCE, convergence_point, merge_traces
from fedbed.transport import DEFAULT_BASE_PORT

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="fedbed", description="Localhost federated learning testbed.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    lp = sub.add_parser("launch", help="run an example on N nodes")
    lp.add_argument("--nodes", type=int, required=True)
    lp.add_argument("--example", required=True, help="example1, example2, example3 or module:function")
    lp.add_argument("--server-id", type=int, default=0)
    lp.add_argument("--base-port", type=int, default=DEFAULT_BASE_PORT)
    lp.add_argument("--iters", type=int, default=None)
    lp.add_argument("--transport", choices=["tcp", "sim"], default="tcp")
    lp.add_argument("--seed", type=int, default=0)
    lp.add_argument("--policy", choices=["fifo", "shuffle"], default="shuffle",
                    help="sim transport delivery order (default: seeded shuffle)")
    lp.add_argument("--trace-dir", default=".")
    lp.add_argument("--timeout", type=float, default=30.0)
    lp.add_argument("--absent", type=int, action="append", default=[],
                    help="do not start this node id (fault injection, repeatable)")
    lp.add_argument("--verbose", action="store_true")

    cp = sub.add_parser("converge", help="convergence point of trace CSV files")
    cp.add_argument("files", nargs="+")
    cp.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    return p


def _launch(args) -> int:
    spec = LaunchSpec(
        no_nodes=args.nodes,
        example=args.example,
        fl_srv_id=args.server_id,
        base_port=args.base_port,
        transport=args.transport,
        seed=args.seed,
        policy=args.policy,
        no_iters=args.iters,
        trace_dir=args.trace_dir,
        timeout=args.timeout,
        verbose=args.verbose,
        absent=tuple(args.absent),
    )
    try:
        report = launch(spec)
    except LaunchError as exc:
        print(f"fedbed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(report.format())
    return report.exit_code


def _converge(args) -> int:
    try:
        result = convergence_point(merge_traces(args.files), args.tolerance)
    except (TraceFormatError, TypeError, OSError) as exc:
        print(f"fedbed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(result.summary())
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "launch":
        return _launch(args)
    return _converge(args)


if __name__ == "__main__":
    sys.exit(main())
