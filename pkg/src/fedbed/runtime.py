"""Node-side API: startup handshake and the generic federated algorithms.

A program creates one :class:`Node` per process (or per simulated node),
then calls :meth:`Node.fl_centralized` or :meth:`Node.fl_decentralized`
with a server callback ``sfun(pdata, msgs)`` and a client callback
``cfun(ldata, pdata, msg)``. Only local data and callback results travel
over the wire; private data is handed to the callbacks and nowhere else.
"""

from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Any, Callable

from fedbed import codec
from fedbed.codec import Envelope, MsgType
from fedbed.errors import (
    CallbackError,
    ConfigError,
    ConnectError,
    EncodeError,
    HandshakeTimeout,
    ProtocolError,
    RecvTimeout,
    UsageError,
)
from fedbed.transport import DEFAULT_BASE_PORT, SimNetwork, TcpTransport, check_topology

log = logging.getLogger(__name__)

ServerCallback = Callable[[Any, list], Any]
ClientCallback = Callable[[Any, Any, Any], Any]
IterationHook = Callable[[int, Any], None]

COORDINATOR = 0


@dataclass(frozen=True)
class NodeConfig:
    no_nodes: int
    node_id: int
    fl_srv_id: int = 0
    base_port: int = DEFAULT_BASE_PORT
    recv_timeout: float = 30.0

    def __post_init__(self):
        if type(self.no_nodes) is not int or self.no_nodes < 2:
            raise ConfigError(f"noNodes must be an integer >= 2, got {self.no_nodes!r}")
        check_topology(self.node_id, self.no_nodes, self.base_port)
        if type(self.fl_srv_id) is not int or not 0 <= self.fl_srv_id < self.no_nodes:
            raise ConfigError(f"flSrvId {self.fl_srv_id!r} not in [0, {self.no_nodes})")
        if not self.recv_timeout > 0:
            raise ConfigError(f"recvTimeout must be positive, got {self.recv_timeout!r}")


class Node:
    """One participant of a federated run.

    Construction opens the transport and blocks until the startup handshake
    completes: node 0 collects a HELLO from every peer, then broadcasts its
    own HELLO. Pass ``network`` to run over an in-process
    :class:`~fedbed.transport.SimNetwork` instead of loopback TCP.

    ``log`` records every envelope the node sends or consumes as
    ``(direction, type, seq, iter, peer)`` tuples, in protocol order.
    """

    def __init__(
        self,
        no_nodes: int,
        node_id: int,
        fl_srv_id: int = 0,
        *,
        base_port: int = DEFAULT_BASE_PORT,
        recv_timeout: float = 30.0,
        network: SimNetwork | None = None,
        transport=None,
    ):
        self.config = NodeConfig(no_nodes, node_id, fl_srv_id, base_port, recv_timeout)
        if transport is None:
            if network is not None:
                transport = network.open(node_id)
            else:
                transport = TcpTransport(
                    node_id, no_nodes, base_port, connect_budget=recv_timeout
                )
        self._transport = transport
        self._pending: dict[int, deque] = defaultdict(deque)
        self._round = 0
        self.log: list[tuple[str, str, int, int, int]] = []
        self._closed = False
        try:
            self._handshake()
        except BaseException:
            self.close()
            raise

    @property
    def node_id(self) -> int:
        return self.config.node_id

    @property
    def no_nodes(self) -> int:
        return self.config.no_nodes

    @property
    def fl_srv_id(self) -> int:
        return self.config.fl_srv_id

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def close(self) -> None:
        """Release the transport. Safe to call more than once."""
        if getattr(self, "_closed", True):
            return
        self._closed = True
        self._transport.close()

    # -- messaging -------------------------------------------------------

    def _send(self, dst, env):
        self._transport.send(dst, env)
        self.log.append(("send", env.msg_type.value, env.seq, env.iter, dst))

    def _broadcast(self, env):
        failed = ()
        try:
            self._transport.broadcast(env)
        except ConnectError as exc:
            failed = exc.failed
            raise
        finally:
            for dst in range(self.no_nodes):
                if dst != self.node_id and dst not in failed:
                    self.log.append(("send", env.msg_type.value, env.seq, env.iter, dst))

    def _consume(self, env):
        self.log.append(("recv", env.msg_type.value, env.seq, env.iter, env.src))
        return env

    def _next(self, rnd, timeout=None):
        """Next envelope of round ``rnd``; later rounds are parked, earlier ones are errors."""
        parked = self._pending.get(rnd)
        if parked:
            return self._consume(parked.popleft())
        if timeout is None:
            timeout = self.config.recv_timeout
        while True:
            env = self._transport.recv(timeout)
            if env.iter == rnd:
                return self._consume(env)
            if env.iter < rnd:
                raise ProtocolError(
                    f"node {self.node_id} in round {rnd} got a stale {env.msg_type.value} "
                    f"for round {env.iter} from node {env.src}"
                )
            self._pending[env.iter].append(env)

    def _handshake(self):
        n = self.no_nodes
        hello = Envelope(MsgType.HELLO, 0, 0, self.node_id, None)
        if self.node_id == COORDINATOR:
            seen = set()
            deadline = self._transport.now() + self.config.recv_timeout
            while len(seen) < n - 1:
                remaining = deadline - self._transport.now()
                try:
                    if remaining <= 0:
                        raise RecvTimeout("handshake budget exhausted")
                    env = self._next(0, remaining)
                except RecvTimeout as exc:
                    missing = sorted(set(range(1, n)) - seen)
                    raise HandshakeTimeout(
                        f"node 0: no HELLO from peers {missing} within "
                        f"{self.config.recv_timeout} s",
                        missing,
                    ) from exc
                if env.msg_type is not MsgType.HELLO or env.src in seen:
                    raise ProtocolError(f"node 0: unexpected {env} during handshake")
                seen.add(env.src)
            self._broadcast(hello)
        else:
            self._send(COORDINATOR, hello)
            env = self._next(0)
            if env.msg_type is not MsgType.HELLO or env.src != COORDINATOR:
                raise ProtocolError(f"node {self.node_id}: unexpected {env} during handshake")

    # -- callbacks -------------------------------------------------------

    def _call(self, name, fn, *args):
        try:
            value = fn(*args)
        except Exception as exc:
            raise CallbackError(f"node {self.node_id}: {name} raised {exc!r}") from exc
        try:
            codec.check_value(value)
        except EncodeError as exc:
            raise CallbackError(f"node {self.node_id}: {name} returned an invalid value: {exc}") from exc
        return value

    def _check_usable(self, no_iters):
        if self._closed:
            raise UsageError(f"node {self.node_id} has been destroyed")
        if type(no_iters) is not int or no_iters < 1:
            raise UsageError(f"noIters must be a positive integer, got {no_iters!r}")

    # -- generic algorithms ----------------------------------------------

    def fl_centralized(
        self,
        sfun: ServerCallback,
        cfun: ClientCallback,
        ldata: Any,
        pdata: Any,
        no_iters: int = 1,
        on_iter: IterationHook | None = None,
    ) -> Any:
        """Star-topology rounds around the server node ``fl_srv_id``.

        Each round the server broadcasts its local data; every client
        replaces its local data with ``cfun(ldata, pdata, server_data)`` and
        sends it back; the server replaces its local data with
        ``sfun(pdata, updates)``, updates ordered by ascending client id.
        ``on_iter(k, ldata)`` fires after round ``k`` (1-based) completes
        locally. Returns the final local data.
        """
        self._check_usable(no_iters)
        codec.check_value(ldata)
        for k in range(1, no_iters + 1):
            self._round += 1
            rnd = self._round
            if self.node_id == self.fl_srv_id:
                ldata = self._server_round(rnd, sfun, ldata, pdata)
            else:
                ldata = self._client_round(rnd, cfun, ldata, pdata)
            if on_iter is not None:
                on_iter(k, ldata)
        return ldata

    def _server_round(self, rnd, sfun, ldata, pdata):
        self._broadcast(Envelope(MsgType.CENTRAL_DATA, 0, rnd, self.node_id, ldata))
        updates = {}
        while len(updates) < self.no_nodes - 1:
            env = self._next(rnd)
            if env.msg_type is not MsgType.CENTRAL_DATA or env.src in updates:
                raise ProtocolError(f"server {self.node_id}: unexpected {env} in round {rnd}")
            updates[env.src] = env.data
        msgs = [updates[j] for j in sorted(updates)]
        return self._call("sfun", sfun, pdata, msgs)

    def _client_round(self, rnd, cfun, ldata, pdata):
        env = self._next(rnd)
        if env.msg_type is not MsgType.CENTRAL_DATA or env.src != self.fl_srv_id:
            raise ProtocolError(f"client {self.node_id}: unexpected {env} in round {rnd}")
        update = self._call("cfun", cfun, ldata, pdata, env.data)
        self._send(self.fl_srv_id, Envelope(MsgType.CENTRAL_DATA, 0, rnd, self.node_id, update))
        return update

    def fl_decentralized(
        self,
        sfun: ServerCallback,
        cfun: ClientCallback,
        ldata: Any,
        pdata: Any,
        no_iters: int = 1,
        on_iter: IterationHook | None = None,
    ) -> Any:
        """Clique rounds where every node is both server and client.

        Each round a node sends its local data (seq 1) to all peers,
        answers every peer's seq-1 message with ``cfun(ldata, pdata, msg)``
        (seq 2, local data untouched), and after all ``2(n-1)`` messages of
        the round are processed sets its local data to
        ``sfun(pdata, replies)``, replies ordered by ascending peer id.
        """
        self._check_usable(no_iters)
        codec.check_value(ldata)
        for k in range(1, no_iters + 1):
            self._round += 1
            ldata = self._decentral_round(self._round, sfun, cfun, ldata, pdata)
            if on_iter is not None:
                on_iter(k, ldata)
        return ldata

    def _decentral_round(self, rnd, sfun, cfun, ldata, pdata):
        peers = self.no_nodes - 1
        self._broadcast(Envelope(MsgType.DECENTRAL, 1, rnd, self.node_id, ldata))
        answered = set()
        replies = {}
        while len(answered) < peers or len(replies) < peers:
            env = self._next(rnd)
            if env.msg_type is not MsgType.DECENTRAL:
                raise ProtocolError(f"node {self.node_id}: unexpected {env} in round {rnd}")
            if env.seq == 1:
                if env.src in answered:
                    raise ProtocolError(f"node {self.node_id}: duplicate request from {env.src}")
                answered.add(env.src)
                reply = self._call("cfun", cfun, ldata, pdata, env.data)
                self._send(env.src, Envelope(MsgType.DECENTRAL, 2, rnd, self.node_id, reply))
            else:
                if env.src in replies:
                    raise ProtocolError(f"node {self.node_id}: duplicate reply from {env.src}")
                replies[env.src] = env.data
        msgs = [replies[j] for j in sorted(replies)]
        return self._call("sfun", sfun, pdata, msgs)


def create_node(config: NodeConfig, *, network: SimNetwork | None = None) -> Node:
    return Node(
        config.no_nodes,
        config.node_id,
        config.fl_srv_id,
        base_port=config.base_port,
        recv_timeout=config.recv_timeout,
        network=network,
    )


def destroy_node(node: Node) -> None:
    node.close()

