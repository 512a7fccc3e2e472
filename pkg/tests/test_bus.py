import threading

import numpy as np
import pytest

from conftest import a, decoupled_network
from sensidmpc.bus import (
    ADJOINT,
    KIND_ORDER,
    STATE,
    CommBus,
    Message,
    coordinator_reduce,
    exchange_round,
    expected_counts,
    outgoing_messages,
)
from sensidmpc.errors import MissingReport, TopologyViolation
from sensidmpc.models import coupled_vdp

N = 21


def round_messages(net, q=1):
    return {i: outgoing_messages(net.graph, i, q, np.full((N, n), float(i)), np.full((N, n), -float(i)))
            for i, n in enumerate(net.state_dims)}


def test_vdp_round_counts():
    net = coupled_vdp()
    out = round_messages(net)
    assert len(out[a(1)]) == 2 and all(m.kind == STATE for m in out[a(1)])
    assert {m.receiver + 1 for m in out[a(1)]} == {2, 3}
    assert len(out[a(2)]) == 4 and len(out[a(3)]) == 4
    bus = CommBus(net.graph, net.state_dims)
    inbox = exchange_round(bus, out)
    assert bus.step.messages == 10
    assert bus.step.components == 20
    assert bus.step.bytes == 10 * (32 + 8 * N * 2)
    assert bus.step.rounds == 1
    assert sum(len(v) for v in inbox.values()) == 10


def test_component_count_for_four_and_two_rounds():
    net = coupled_vdp()
    assert expected_counts(net.graph, net.state_dims, 4) == (40, 80)
    assert expected_counts(net.graph, net.state_dims, 2) == (20, 40)
    bus = CommBus(net.graph, net.state_dims)
    for q in range(1, 5):
        exchange_round(bus, round_messages(net, q))
    assert (bus.step.messages, bus.step.components) == (40, 80)


def test_no_edges_no_messages():
    net = decoupled_network(3)
    bus = CommBus(net.graph, net.state_dims)
    inbox = exchange_round(bus, round_messages(net))
    assert bus.step.messages == 0 and all(v == [] for v in inbox.values())


def test_topology_violation():
    net = coupled_vdp()
    bus = CommBus(net.graph, net.state_dims)
    # agent 1 influences nobody backwards: it has no senders to return adjoints to
    with pytest.raises(TopologyViolation):
        bus.post(Message(a(1), a(2), ADJOINT, 1, np.zeros((N, 2))))
    with pytest.raises(TopologyViolation):
        exchange_round(bus, {a(2): [Message(a(3), a(2), STATE, 1, np.zeros((N, 2)))]})


def test_state_to_all_neighbors_adjoint_to_senders():
    net = coupled_vdp()
    bus = CommBus(net.graph, net.state_dims)
    assert bus.allowed(a(2), a(1), STATE) and bus.allowed(a(2), a(1), ADJOINT)
    assert bus.allowed(a(1), a(2), STATE) and not bus.allowed(a(1), a(2), ADJOINT)


def test_inbox_order_independent_of_posting_order():
    net = coupled_vdp()
    out = round_messages(net)
    flat = [m for i in out for m in out[i]]
    b1, b2 = CommBus(net.graph, net.state_dims), CommBus(net.graph, net.state_dims)
    for m in flat:
        b1.post(m)
    for m in reversed(flat):
        b2.post(m)
    i1, i2 = b1.deliver(), b2.deliver()
    key = lambda box: {i: [(m.sender, m.kind) for m in box[i]] for i in box}
    assert key(i1) == key(i2)
    for i in i1:
        keys = [(m.sender, KIND_ORDER[m.kind]) for m in i1[i]]
        assert keys == sorted(keys)


def test_concurrent_posting():
    net = coupled_vdp()
    out = round_messages(net)
    bus = CommBus(net.graph, net.state_dims)
    threads = [threading.Thread(target=lambda i=i: [bus.post(m) for m in out[i]]) for i in out]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    inbox = bus.deliver()
    assert sum(len(v) for v in inbox.values()) == 10


def test_payload_is_frozen_copy():
    net = coupled_vdp()
    bus = CommBus(net.graph, net.state_dims)
    x = np.zeros((N, 2))
    inbox = exchange_round(bus, {a(1): [Message(a(1), a(2), STATE, 1, x)]})
    x[:] = 1.0
    got = inbox[a(2)][0].payload
    assert np.all(got == 0.0)
    with pytest.raises(ValueError):
        got[0, 0] = 2.0


def test_setup_round_counted_separately():
    net = coupled_vdp()
    bus = CommBus(net.graph, net.state_dims)
    exchange_round(bus, round_messages(net, 0), setup=True)
    assert bus.setup.messages == 10 and bus.step.messages == 0
    exchange_round(bus, round_messages(net, 1))
    done = bus.close_step()
    assert done.messages == 10 and bus.step.messages == 0 and bus.history == [done]


def test_coordinator_reduce():
    assert coordinator_reduce({0: True, 1: True}, 2) is True
    assert coordinator_reduce({0: True, 1: False}, 2) is False
    assert coordinator_reduce({0: True, 1: True}, 2, fixed=True) is False
    with pytest.raises(MissingReport):
        coordinator_reduce({0: True}, 2)
