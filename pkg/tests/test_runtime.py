import random
import threading

import pytest

import oracle
from fedbed.codec import Envelope, MsgType
from fedbed.errors import (
    CallbackError,
    ConfigError,
    ConnectError,
    HandshakeTimeout,
    ProtocolError,
    RecvTimeout,
    UsageError,
)
from fedbed.examples import averaging_client, averaging_server
from fedbed.runtime import Node, NodeConfig
from fedbed.transport import DeliveryPolicy, SimNetwork


def run_sim(n, body, policy=DeliveryPolicy.FIFO, seed=0, timeout=30.0, skip=()):
    """Run ``body(node)`` on every node over a fresh SimNetwork; return (outcomes, net)."""
    net = SimNetwork(n, policy, seed, connect_budget=timeout)

    def program(i):
        with Node(n, i, network=net, recv_timeout=timeout) as node:
            return body(node)

    for i in range(n):
        if i not in skip:
            net.spawn(program, i, name=f"node-{i}")
    return net.run(), net


def results(outcomes):
    for o in outcomes:
        if o.error is not None:
            raise o.error
    return [o.result for o in outcomes]


def model(node):
    return [float(node.node_id + 1)]


# -- configuration -------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(no_nodes=1, node_id=0), dict(no_nodes=3, node_id=3),
                                dict(no_nodes=3, node_id=0, fl_srv_id=5),
                                dict(no_nodes=3, node_id=0, recv_timeout=0)])
def test_invalid_node_config(kw):
    with pytest.raises(ConfigError):
        NodeConfig(**kw)


# -- handshake -----------------------------------------------------------------

@pytest.mark.parametrize("n", [2, 3, 5])
def test_handshake(n):
    outcomes, net = run_sim(n, lambda node: node.log)
    logs = results(outcomes)
    coord = logs[0]
    assert [e[:2] for e in coord[: n - 1]] == [("recv", "HELLO")] * (n - 1)
    assert sorted(e[4] for e in coord[: n - 1]) == list(range(1, n))
    assert coord[n - 1:] == [("send", "HELLO", 0, 0, j) for j in range(1, n)]
    for log in logs[1:]:
        assert log == [("send", "HELLO", 0, 0, 0), ("recv", "HELLO", 0, 0, 0)]


def test_handshake_timeout_names_missing_peer():
    outcomes, net = run_sim(3, lambda node: None, timeout=5.0, skip=(2,))
    err = outcomes[0].error
    assert isinstance(err, HandshakeTimeout)
    assert err.missing == (2,)
    assert "[2]" in str(err)
    assert isinstance(outcomes[1].error, RecvTimeout)
    assert net.clock == 5.0


# -- centralized ---------------------------------------------------------------

def test_centralized_first_round_values():
    def body(node):
        return node.fl_centralized(averaging_server, averaging_client, model(node), None, 1)

    assert results(run_sim(3, body)[0]) == [[1.75], [1.5], [2.0]]


def test_centralized_ten_rounds_server_fixed_point():
    seen = []

    def body(node):
        hook = (lambda k, v: seen.append((k, v))) if node.node_id == 0 else None
        return node.fl_centralized(averaging_server, averaging_client, model(node), None, 10, hook)

    out = results(run_sim(3, body)[0])
    assert out[0] == [1.75]
    assert seen == [(k, [1.75]) for k in range(1, 11)]


def test_centralized_pass_through_keeps_server_data():
    def body(node):
        return node.fl_centralized(
            lambda p, msgs: msgs[0], lambda l, p, msg: msg, ["srv"] if node.node_id == 0 else ["cli"], None
        )

    assert results(run_sim(2, body)[0]) == [["srv"], ["srv"]]


def test_centralized_non_default_server():
    net = SimNetwork(3)

    def program(i):
        with Node(3, i, 2, network=net) as node:
            return node.fl_centralized(averaging_server, averaging_client, model(node), None, 1)

    for i in range(3):
        net.spawn(program, i)
    out = results(net.run())
    expected = oracle.centralized(averaging_server, averaging_client, [[1.0], [2.0], [3.0]], [None] * 3, 1, server=2)
    assert out == expected == [[2.0], [2.5], [2.25]]


def test_server_receives_updates_in_ascending_source_order():
    def body(node):
        return node.fl_centralized(
            lambda p, msgs: msgs, lambda l, p, msg: l, node.node_id, None
        )

    for seed in range(10):
        out = results(run_sim(4, body, DeliveryPolicy.SEEDED_SHUFFLE, seed)[0])
        assert out[0] == [1, 2, 3]


# -- decentralized -------------------------------------------------------------

def test_decentralized_first_round_values():
    def body(node):
        return node.fl_decentralized(averaging_server, averaging_client, model(node), None, 1)

    assert results(run_sim(3, body)[0]) == [[1.75], [2.0], [2.25]]


def test_decentralized_identity_swaps_two_nodes():
    def body(node):
        return node.fl_decentralized(
            lambda p, msgs: sorted(msgs)[0], lambda l, p, msg: l, [node.node_id + 1], None
        )

    assert results(run_sim(2, body)[0]) == [[2], [1]]


def test_decentralized_message_accounting():
    n, iters = 4, 3

    def body(node):
        node.fl_decentralized(averaging_server, averaging_client, model(node), None, iters)
        return node.log

    for log in results(run_sim(n, body, DeliveryPolicy.SEEDED_SHUFFLE, 11)[0]):
        for rnd in range(1, iters + 1):
            sent = [e for e in log if e[0] == "send" and e[3] == rnd]
            got = [e for e in log if e[0] == "recv" and e[3] == rnd]
            assert len(sent) == len(got) == 2 * (n - 1)
            assert sorted(e[2] for e in sent) == [1] * (n - 1) + [2] * (n - 1)


def test_client_does_not_update_in_decentralized_phase_two():
    seen = []

    def body(node):
        def cfun(l, p, msg):
            seen.append((node.node_id, l))
            return l
        return node.fl_decentralized(lambda p, msgs: msgs[0], cfun, node.node_id * 10, None, 1)

    results(run_sim(3, body)[0])
    for nid, l in seen:
        assert l == nid * 10


def test_rounds_continue_across_calls():
    def body(node):
        x = node.fl_decentralized(averaging_server, averaging_client, model(node), None, 2)
        return node.fl_centralized(averaging_server, averaging_client, x, None, 2)

    for seed in range(5):
        out = results(run_sim(3, body, DeliveryPolicy.SEEDED_SHUFFLE, seed)[0])
        x = oracle.decentralized(averaging_server, averaging_client, [[1.0], [2.0], [3.0]], [None] * 3, 2)
        assert out == oracle.centralized(averaging_server, averaging_client, x, [None] * 3, 2)


@pytest.mark.parametrize("mode", ["centralized", "decentralized"])
def test_oracle_equivalence_random(mode):
    rng = random.Random(1234 if mode == "centralized" else 4321)
    ref = getattr(oracle, mode)
    for _ in range(20):
        n = rng.randint(2, 6)
        iters = rng.randint(1, 10)
        init = [[rng.uniform(-100, 100)] for _ in range(n)]

        def body(node, init=init, iters=iters):
            fl = getattr(node, f"fl_{mode}")
            return fl(averaging_server, averaging_client, init[node.node_id], None, iters)

        got = results(run_sim(n, body, DeliveryPolicy.SEEDED_SHUFFLE, rng.randrange(2**32))[0])
        want = ref(averaging_server, averaging_client, init, [None] * n, iters)
        for g, w in zip(got, want):
            assert g[0] == pytest.approx(w[0], abs=1e-12)


def test_progress_up_to_eight_nodes_twenty_rounds():
    for n, seed in [(8, 1), (7, 2), (2, 3)]:
        def body(node):
            return node.fl_decentralized(averaging_server, averaging_client, model(node), None, 20)

        out = results(run_sim(n, body, DeliveryPolicy.SEEDED_SHUFFLE, seed)[0])
        assert len(out) == n


# -- errors and lifecycle ------------------------------------------------------

def test_destroyed_node_is_unusable():
    def body(node):
        node.close()
        node.close()
        with pytest.raises(UsageError):
            node.fl_centralized(averaging_server, averaging_client, [1.0], None)
        return "ok"

    assert results(run_sim(2, body)[0]) == ["ok", "ok"]


def test_destroy_while_peer_waits_surfaces_timeout():
    def body(node):
        if node.node_id == 1:
            node.close()
            return "gone"
        return node.fl_centralized(averaging_server, averaging_client, [1.0], None)

    outcomes, net = run_sim(2, body, timeout=3.0)
    assert outcomes[1].result == "gone"
    assert isinstance(outcomes[0].error, (RecvTimeout, ConnectError))


def test_callback_exception_becomes_callback_error():
    def body(node):
        return node.fl_decentralized(averaging_server, lambda l, p, m: 1 / 0, [1.0], None)

    outcomes, _ = run_sim(2, body, timeout=2.0)
    assert any(isinstance(o.error, CallbackError) for o in outcomes)


def test_unserializable_callback_result_is_callback_error():
    def body(node):
        return node.fl_centralized(lambda p, m: object(), lambda l, p, m: l, [1.0], None)

    outcomes, _ = run_sim(2, body, timeout=2.0)
    assert isinstance(outcomes[0].error, CallbackError)
    assert "invalid value" in str(outcomes[0].error)


def test_stale_round_is_protocol_error():
    net = SimNetwork(2, connect_budget=5)

    def real():
        with Node(2, 0, network=net, recv_timeout=5) as node:
            return node.fl_decentralized(averaging_server, averaging_client, [1.0], None)

    def rogue():
        h = net.open(1)
        h.send(0, Envelope(MsgType.HELLO, 0, 0, 1, None))
        h.recv(5)
        h.send(0, Envelope(MsgType.DECENTRAL, 1, 0, 1, [2.0]))
        h.recv(5)

    net.spawn(real)
    net.spawn(rogue)
    outcomes = net.run()
    assert isinstance(outcomes[0].error, ProtocolError)


def test_future_round_messages_are_buffered():
    """A peer racing one round ahead must be parked, not rejected."""
    net = SimNetwork(2, connect_budget=5)

    def real():
        with Node(2, 0, network=net, recv_timeout=5) as node:
            return node.fl_decentralized(averaging_server, averaging_client, [1.0], None, 2)

    def eager():
        h = net.open(1)
        h.send(0, Envelope(MsgType.HELLO, 0, 0, 1, None))
        h.recv(5)
        # round 2 request goes out before anything from round 1
        h.send(0, Envelope(MsgType.DECENTRAL, 1, 2, 1, [7.0]))
        h.send(0, Envelope(MsgType.DECENTRAL, 1, 1, 1, [3.0]))
        h.send(0, Envelope(MsgType.DECENTRAL, 2, 1, 1, [5.0]))
        h.send(0, Envelope(MsgType.DECENTRAL, 2, 2, 1, [9.0]))
        return [h.recv(5) for _ in range(4)]

    net.spawn(real)
    net.spawn(eager)
    out = results(net.run())
    assert out[0] == [9.0]
    replies = [e for e in out[1] if e.seq == 2]
    assert [(e.iter, e.data) for e in replies] == [(1, [2.0]), (2, [(5.0 + 7.0) / 2])]


def test_private_data_never_on_the_wire():
    secrets = [f"SECRET-{i}-b1e5" for i in range(4)]

    def body(node):
        p = secrets[node.node_id]
        cfun = lambda l, pd, msg: [l[0] + len(pd)]
        sfun = lambda pd, msgs: [sum(m[0] for m in msgs) / len(msgs) + len(pd) * 0]
        x = node.fl_centralized(sfun, cfun, model(node), p, 2)
        return node.fl_decentralized(sfun, cfun, x, p, 2)

    outcomes, net = run_sim(4, body, DeliveryPolicy.SEEDED_SHUFFLE, 5)
    results(outcomes)
    assert net.transcript
    for _, _, frame in net.transcript:
        for s in secrets:
            assert s.encode() not in frame


def test_tcp_nodes_match_sim(base_port):
    n = 3
    out = [None] * n
    errors = []

    def program(i):
        try:
            with Node(n, i, base_port=base_port, recv_timeout=10) as node:
                out[i] = node.fl_decentralized(averaging_server, averaging_client, [float(i + 1)], None, 4)
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=program, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    assert not errors

    def body(node):
        return node.fl_decentralized(averaging_server, averaging_client, model(node), None, 4)

    assert out == results(run_sim(n, body)[0])
