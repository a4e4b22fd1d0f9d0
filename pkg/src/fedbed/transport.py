"""Point-to-point delivery of envelopes between node instances.

Two implementations share one handle surface (``send``, ``recv``,
``broadcast``, ``close``, ``now``):

* :class:`TcpTransport` -- loopback TCP, one listener per node on
  ``base_port + node_id`` and one lazily opened persistent connection per
  ordered pair of nodes, which gives per-sender FIFO for free.
* :class:`SimNetwork` / :class:`SimTransport` -- every node in one process.
  Node code runs in threads under a baton-passing scheduler, so exactly one
  node executes at a time, messages sit in per-pair channels until the
  scheduler delivers them (in FIFO or seeded-shuffle order), and timeouts
  run on a virtual clock. Given the same seed and programs, a run is
  replayed exactly.
"""

from __future__ import annotations

import enum
import itertools
import logging
import queue
import random
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass

from fedbed import codec
from fedbed.codec import Envelope
from fedbed.errors import (
    BindError,
    ClosedError,
    ConfigError,
    ConnectError,
    FedbedError,
    FrameError,
    RecvTimeout,
    UsageError,
)

log = logging.getLogger(__name__)

LOOPBACK = "127.0.0.1"
DEFAULT_BASE_PORT = 16000
DEFAULT_CONNECT_BUDGET = 30.0
DEFAULT_RETRY_INTERVAL = 0.1


@dataclass(frozen=True)
class NodeAddress:
    host: str
    port: int

    @classmethod
    def of(cls, node_id: int, base_port: int = DEFAULT_BASE_PORT, host: str = LOOPBACK):
        return cls(host, base_port + node_id)


def check_topology(node_id: int, no_nodes: int, base_port: int | None = None) -> None:
    if type(no_nodes) is not int or no_nodes < 1:
        raise ConfigError(f"noNodes must be a positive integer, got {no_nodes!r}")
    if type(node_id) is not int or not 0 <= node_id < no_nodes:
        raise ConfigError(f"nodeId {node_id!r} not in [0, {no_nodes})")
    if base_port is not None:
        if base_port < 1024 or base_port + no_nodes - 1 > 65535:
            raise ConfigError(
                f"ports {base_port}..{base_port + no_nodes - 1} fall outside [1024, 65535]"
            )


class _Handle:
    """Behaviour common to both transports."""

    node_id: int
    no_nodes: int

    def _check_dst(self, dst):
        if dst == self.node_id:
            raise UsageError(f"node {self.node_id} cannot send to itself")
        if type(dst) is not int or not 0 <= dst < self.no_nodes:
            raise UsageError(f"destination {dst!r} not in [0, {self.no_nodes})")

    def broadcast(self, env: Envelope) -> None:
        """Send ``env`` to every other node; report all unreachable peers at once."""
        failed = []
        for dst in range(self.no_nodes):
            if dst == self.node_id:
                continue
            try:
                self.send(dst, env)
            except ConnectError:
                failed.append(dst)
        if failed:
            raise ConnectError(f"broadcast from node {self.node_id} failed for peers {failed}", failed)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# TCP


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise FrameError(f"connection closed {len(buf)} bytes into a {n}-byte read")
            return None
        buf += chunk
    return bytes(buf)


_CLOSED = object()


class TcpTransport(_Handle):
    def __init__(
        self,
        node_id: int,
        no_nodes: int,
        base_port: int = DEFAULT_BASE_PORT,
        *,
        host: str = LOOPBACK,
        connect_budget: float = DEFAULT_CONNECT_BUDGET,
        retry_interval: float = DEFAULT_RETRY_INTERVAL,
        tap=None,
    ):
        check_topology(node_id, no_nodes, base_port)
        self.node_id = node_id
        self.no_nodes = no_nodes
        self.base_port = base_port
        self.host = host
        self.connect_budget = connect_budget
        self.retry_interval = retry_interval
        self.tap = tap
        self.address = NodeAddress.of(node_id, base_port, host)
        self._inbox: queue.Queue = queue.Queue()
        self._peers: dict[int, socket.socket] = {}
        self._accepted: list[socket.socket] = []
        self._lock = threading.Lock()
        self._closed = False

        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            listener.bind((host, self.address.port))
        except OSError as exc:
            listener.close()
            raise BindError(f"cannot listen on {host}:{self.address.port}: {exc}") from exc
        listener.listen(max(no_nodes, 8))
        listener.settimeout(0.1)
        self._listener = listener
        self._acceptor = threading.Thread(
            target=self._accept_loop, name=f"accept-{node_id}", daemon=True
        )
        self._acceptor.start()

    def now(self) -> float:
        return time.monotonic()

    def _accept_loop(self):
        while not self._closed:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                if self._closed:
                    conn.close()
                    return
                self._accepted.append(conn)
            threading.Thread(
                target=self._read_loop, args=(conn,), name=f"reader-{self.node_id}", daemon=True
            ).start()

    def _read_loop(self, conn):
        try:
            while True:
                header = _recv_exact(conn, codec.HEADER.size)
                if header is None:
                    return
                body = _recv_exact(conn, codec.body_length(header))
                if body is None:
                    raise FrameError("connection closed before the frame body")
                self._inbox.put(codec.decode(header + body, self.no_nodes))
        except FedbedError as exc:
            self._inbox.put(exc)
        except OSError:
            if not self._closed:
                log.debug("node %d: inbound connection dropped", self.node_id)

    def _connect(self, dst):
        sock = self._peers.get(dst)
        if sock is not None:
            return sock
        addr = (self.host, self.base_port + dst)
        deadline = time.monotonic() + self.connect_budget
        while True:
            try:
                sock = socket.create_connection(addr, timeout=max(self.retry_interval, 1.0))
                break
            except OSError as exc:
                if self._closed:
                    raise ClosedError(f"node {self.node_id} transport is closed") from exc
                if time.monotonic() + self.retry_interval > deadline:
                    raise ConnectError(
                        f"node {self.node_id} could not reach peer {dst} at {addr[0]}:{addr[1]}",
                        [dst],
                    ) from exc
                time.sleep(self.retry_interval)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._peers[dst] = sock
        return sock

    def send(self, dst: int, env: Envelope) -> None:
        if self._closed:
            raise ClosedError(f"node {self.node_id} transport is closed")
        self._check_dst(dst)
        frame = codec.encode(env)
        sock = self._connect(dst)
        try:
            sock.sendall(frame)
        except OSError as exc:
            self._peers.pop(dst, None)
            sock.close()
            raise ConnectError(f"node {self.node_id} lost its connection to peer {dst}", [dst]) from exc
        if self.tap is not None:
            self.tap(self.node_id, dst, frame)

    def recv(self, timeout: float | None = None) -> Envelope:
        if self._closed:
            raise ClosedError(f"node {self.node_id} transport is closed")
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise RecvTimeout(f"node {self.node_id}: nothing received within {timeout} s") from None
        if item is _CLOSED:
            raise ClosedError(f"node {self.node_id} transport is closed")
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            socks = list(self._peers.values()) + self._accepted
            self._peers.clear()
        self._listener.close()
        for s in socks:
            try:
                s.close()
            except OSError:
                pass
        self._inbox.put(_CLOSED)
        self._acceptor.join(timeout=1.0)


# --------------------------------------------------------------------------
# In-process deterministic network


class DeliveryPolicy(str, enum.Enum):
    FIFO = "fifo"
    SEEDED_SHUFFLE = "shuffle"


class SimDeadlock(FedbedError):
    """Every simulated node is blocked forever."""


class _Actor:
    def __init__(self, index, name, fn, args, kwargs):
        self.index = index
        self.name = name
        self.fn, self.args, self.kwargs = fn, args, kwargs
        self.go = threading.Event()
        self.ready = None  # predicate; None means runnable
        self.deadline = None
        self.wake_reason = None
        self.done = False
        self.result = None
        self.error = None


@dataclass
class ActorOutcome:
    name: str
    result: object = None
    error: BaseException | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


class SimNetwork:
    """A whole localhost network in one process, replayable from a seed.

    Used directly (no :meth:`run`), calls never block: ``recv`` pumps
    deliveries until something arrives and otherwise jumps the virtual
    clock past its timeout. Under :meth:`run`, each spawned function is a
    simulated node and blocking calls hand control back to the scheduler.
    """

    def __init__(
        self,
        no_nodes: int,
        policy: DeliveryPolicy | str = DeliveryPolicy.FIFO,
        seed: int = 0,
        *,
        connect_budget: float = DEFAULT_CONNECT_BUDGET,
        retry_interval: float = DEFAULT_RETRY_INTERVAL,
    ):
        if type(no_nodes) is not int or no_nodes < 1:
            raise ConfigError(f"noNodes must be a positive integer, got {no_nodes!r}")
        self.no_nodes = no_nodes
        self.policy = DeliveryPolicy(policy)
        self.seed = seed
        self.connect_budget = connect_budget
        self.retry_interval = retry_interval
        self.clock = 0.0
        self._rng = random.Random(seed)
        self._order = itertools.count()
        self._channels: dict[tuple[int, int], deque] = {}
        self._inboxes = {i: deque() for i in range(no_nodes)}
        self._open: set[int] = set()
        self._handles: dict[int, SimTransport] = {}
        self._actors: list[_Actor] = []
        self._current = threading.local()
        self._yielded = threading.Event()
        self._running = False
        # (src, dst, frame) in send order, and (src, dst, frame) in delivery order
        self.transcript: list[tuple[int, int, bytes]] = []
        self.deliveries: list[tuple[int, int, bytes]] = []

    # -- handles ---------------------------------------------------------

    def open(self, node_id: int) -> SimTransport:
        check_topology(node_id, self.no_nodes)
        if node_id in self._open:
            raise BindError(f"node {node_id} is already listening on this network")
        self._open.add(node_id)
        self._inboxes[node_id].clear()
        handle = SimTransport(self, node_id)
        self._handles[node_id] = handle
        return handle

    def is_open(self, node_id: int) -> bool:
        return node_id in self._open

    def in_flight(self) -> int:
        return sum(len(q) for q in self._channels.values())

    # -- delivery --------------------------------------------------------

    def deliver_one(self) -> bool:
        """Move one in-flight frame to its destination inbox; False if none."""
        live = sorted(k for k, q in self._channels.items() if q)
        if not live:
            return False
        if self.policy is DeliveryPolicy.FIFO:
            key = min(live, key=lambda k: self._channels[k][0][0])
        else:
            key = self._rng.choice(live)
        _, frame = self._channels[key].popleft()
        src, dst = key
        self.deliveries.append((src, dst, frame))
        if dst in self._open:
            self._inboxes[dst].append(frame)
        else:
            log.debug("dropping frame %d->%d: destination closed", src, dst)
        return True

    def _enqueue(self, src, dst, frame):
        self._channels.setdefault((src, dst), deque()).append((next(self._order), frame))
        self.transcript.append((src, dst, frame))

    # -- blocking --------------------------------------------------------

    def _actor(self):
        return getattr(self._current, "actor", None)

    def _block(self, ready, timeout):
        """Wait until ``ready()`` or ``timeout`` virtual seconds pass.

        Returns True if the condition was met. Must be called from a
        scheduled node; unmanaged callers use the non-blocking paths.
        """
        actor = self._actor()
        if ready():
            return True
        actor.ready = ready
        actor.deadline = None if timeout is None else self.clock + timeout
        actor.wake_reason = None
        actor.go.clear()
        self._yielded.set()
        actor.go.wait()
        reason = actor.wake_reason
        if reason == "deadlock":
            raise SimDeadlock(f"{actor.name}: every simulated node is blocked")
        return reason != "timeout"

    def _send(self, src, dst, frame):
        if dst not in self._open:
            if self._actor() is None:
                self.clock += self.connect_budget
                raise ConnectError(f"node {src} could not reach peer {dst}", [dst])
            if not self._block(lambda: dst in self._open, self.connect_budget):
                raise ConnectError(f"node {src} could not reach peer {dst}", [dst])
        self._enqueue(src, dst, frame)

    def _recv(self, node_id, timeout):
        inbox = self._inboxes[node_id]
        handle = self._handles[node_id]
        if not inbox:
            if self._actor() is None:
                while not inbox and self.deliver_one():
                    pass
                if not inbox:
                    if timeout is None:
                        raise SimDeadlock(f"node {node_id} would wait forever")
                    self.clock += timeout
            else:
                self._block(lambda: bool(inbox) or handle.closed, timeout)
        if handle.closed:
            raise ClosedError(f"node {node_id} transport is closed")
        if not inbox:
            raise RecvTimeout(f"node {node_id}: nothing received within {timeout} s")
        return codec.decode(inbox.popleft(), self.no_nodes)

    def _close(self, node_id):
        self._open.discard(node_id)
        self._inboxes[node_id].clear()

    # -- scheduling ------------------------------------------------------

    def spawn(self, fn, *args, name: str | None = None, **kwargs) -> None:
        """Register ``fn(*args, **kwargs)`` to run as a simulated node."""
        if self._running:
            raise UsageError("cannot spawn while the network is running")
        idx = len(self._actors)
        self._actors.append(_Actor(idx, name or f"actor-{idx}", fn, args, kwargs))

    def _body(self, actor):
        self._current.actor = actor
        actor.go.wait()
        try:
            actor.result = actor.fn(*actor.args, **actor.kwargs)
        except BaseException as exc:  # noqa: BLE001 - reported through ActorOutcome
            actor.error = exc
        finally:
            actor.done = True
            self._yielded.set()

    def _pick(self, active):
        while True:
            for a in active:
                if a.ready is None or a.ready():
                    a.ready = None
                    a.wake_reason = "ready"
                    return a
            if self.deliver_one():
                continue
            timed = [a for a in active if a.deadline is not None]
            if timed:
                a = min(timed, key=lambda x: (x.deadline, x.index))
                self.clock = max(self.clock, a.deadline)
                a.ready = None
                a.wake_reason = "timeout"
                return a
            a = active[0]
            a.ready = None
            a.wake_reason = "deadlock"
            return a

    def run(self) -> list[ActorOutcome]:
        """Run every spawned node to completion; outcomes come back in spawn order."""
        actors, self._actors = self._actors, []
        self._running = True
        threads = [
            threading.Thread(target=self._body, args=(a,), name=a.name, daemon=True)
            for a in actors
        ]
        try:
            for t in threads:
                t.start()
            while True:
                active = [a for a in actors if not a.done]
                if not active:
                    break
                a = self._pick(active)
                self._yielded.clear()
                a.go.set()
                self._yielded.wait()
        finally:
            self._running = False
        for t in threads:
            t.join()
        return [ActorOutcome(a.name, a.result, a.error) for a in actors]


class SimTransport(_Handle):
    def __init__(self, net: SimNetwork, node_id: int):
        self.net = net
        self.node_id = node_id
        self.no_nodes = net.no_nodes
        self.closed = False

    def now(self) -> float:
        return self.net.clock

    def send(self, dst: int, env: Envelope) -> None:
        if self.closed:
            raise ClosedError(f"node {self.node_id} transport is closed")
        self._check_dst(dst)
        self.net._send(self.node_id, dst, codec.encode(env))

    def recv(self, timeout: float | None = None) -> Envelope:
        if self.closed:
            raise ClosedError(f"node {self.node_id} transport is closed")
        return self.net._recv(self.node_id, timeout)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.net._close(self.node_id)
