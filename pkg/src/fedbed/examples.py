"""The three validation algorithms, runnable by name from the launcher.

Every registered program has the signature::

    program(no_nodes, node_id, fl_srv_id=0, *, no_iters=None, on_iter=None, **node_opts)

and returns the node's final local data. ``node_opts`` go straight to
:class:`fedbed.runtime.Node` (``network``, ``base_port``, ``recv_timeout``).
"""

from __future__ import annotations

import importlib
from typing import Callable

from fedbed.errors import LaunchError
from fedbed.runtime import Node

THRESHOLD = 69.5
LOW_READING = 68.0
HIGH_READING = 70.5


# -- example 1: fraction of sensor readings above a threshold ---------------

def threshold_client(local_data, private_data, msg):
    reading, threshold = local_data, msg
    return 1.0 if reading > threshold else 0.0


def fraction_server(private_data, msgs):
    return sum(msgs) / len(msgs)


def example1(no_nodes, node_id, fl_srv_id=0, *, no_iters=None, on_iter=None, **node_opts):
    if node_id == fl_srv_id:
        local_data = THRESHOLD
    elif node_id == no_nodes - 1:
        local_data = HIGH_READING
    else:
        local_data = LOW_READING
    with Node(no_nodes, node_id, fl_srv_id, **node_opts) as node:
        return node.fl_centralized(
            fraction_server, threshold_client, local_data, None, no_iters or 1, on_iter
        )


# -- examples 2 and 3: averaging single-element models ----------------------

def averaging_client(local_data, private_data, msg):
    return [(local_data[0] + msg[0]) / 2]


def averaging_server(private_data, msgs):
    tmp = 0.0
    for lst in msgs:
        tmp = tmp + lst[0]
    return [tmp / len(msgs)]


def example2(no_nodes, node_id, fl_srv_id=0, *, no_iters=None, on_iter=None, **node_opts):
    """Centralized averaging: clients move halfway towards the server each round."""
    with Node(no_nodes, node_id, fl_srv_id, **node_opts) as node:
        return node.fl_centralized(
            averaging_server, averaging_client, [node_id + 1], None, no_iters or 10, on_iter
        )


def example3(no_nodes, node_id, fl_srv_id=0, *, no_iters=None, on_iter=None, **node_opts):
    """Decentralized averaging; ``fl_srv_id`` is accepted for a uniform signature and ignored."""
    with Node(no_nodes, node_id, **node_opts) as node:
        return node.fl_decentralized(
            averaging_server, averaging_client, [node_id + 1], None, no_iters or 10, on_iter
        )


Program = Callable[..., object]

EXAMPLES: dict[str, Program] = {
    "example1": example1,
    "example2": example2,
    "example3": example3,
}


def register_example(name: str, program: Program) -> None:
    """Make ``program`` launchable under ``name`` (in-process runs only)."""
    EXAMPLES[name] = program


def resolve(name: str) -> Program:
    """Look up a registered name or import a ``module:function`` reference."""
    if name in EXAMPLES:
        return EXAMPLES[name]
    if ":" in name:
        mod, _, attr = name.partition(":")
        try:
            return getattr(importlib.import_module(mod), attr)
        except (ImportError, AttributeError) as exc:
            raise LaunchError(f"cannot import program {name!r}: {exc}") from exc
    raise LaunchError(f"unknown example {name!r}; known: {', '.join(sorted(EXAMPLES))}")
