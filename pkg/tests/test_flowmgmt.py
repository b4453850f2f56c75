from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from nbr_edge.flowmgmt import (
    FlowManager,
    ManagedServiceFlow,
    Segment,
    decode_segment,
    encode_segment,
    segment_sizes,
)
from nbr_edge.nbr import NbrLayer
from nbr_edge.resolver import NrService, Resolver
from nbr_edge.simnet import Endpoint, Network, Simulator, mac_from_index
from nbr_edge.topology import build_topology


@given(st.integers(0, 100_000), st.integers(1, 9000))
def test_segment_sizes_cover_bytes(nbytes, mtu):
    sizes = segment_sizes(nbytes, mtu)
    assert sum(sizes) == nbytes
    assert all(0 < s <= mtu for s in sizes) or sizes == [0]
    assert len(sizes) == max(1, -(-nbytes // mtu))


def test_segment_codec():
    seg = Segment(3, 1, 4, 1500)
    kind, back = decode_segment(encode_segment(b"D", seg))
    assert kind == b"D" and back == seg
    kind, ack = decode_segment(encode_segment(b"A", seg))
    assert kind == b"A" and ack == Segment(3, 1, 4, 0)
    with pytest.raises(ValueError):
        decode_segment(encode_segment(b"D", seg)[:-1])


def test_round_robin_wire_order():
    flow = ManagedServiceFlow("a", "b", window=100, mtu=1500)
    flow.submit(4500)
    flow.submit(1500)
    flow.submit(3000)
    order = [(s.txn_id, s.seq) for s in flow.tick()]
    assert order == [(1, 0), (2, 0), (3, 0), (1, 1), (3, 1), (1, 2)]


@given(st.lists(st.integers(1, 20_000), min_size=1, max_size=8), st.integers(1, 16))
def test_window_and_fairness(sizes, window):
    flow = ManagedServiceFlow("a", "b", window=window, mtu=1500)
    txns = [flow.submit(n) for n in sizes]
    while flow.queued or flow.in_flight:
        sent = flow.tick()
        assert flow.in_flight <= window
        for seg in sent:
            flow.ack(seg)
    assert all(t.done for t in txns)
    # at any prefix of the wire order, active transactions differ by at most one segment
    counts = {t.txn_id: 0 for t in txns}
    for seg in flow.wire_order:
        counts[seg.txn_id] += 1
        live = [counts[t.txn_id] for t in txns if counts[t.txn_id] < t.total or t.txn_id == seg.txn_id]
        assert max(live) - min(live) <= 1


def test_window_limits_in_flight():
    flow = ManagedServiceFlow("a", "b", window=4, mtu=100)
    flow.submit(1000)
    assert len(flow.tick()) == 4
    assert flow.tick() == []
    flow.ack(Segment(1, 0, 10, 100))
    assert len(flow.tick()) == 1


def test_closed_flow_rejects_submit():
    flow = ManagedServiceFlow("a", "b")
    flow.closed = True
    with pytest.raises(RuntimeError):
        flow.submit(10)


def _pair(window=64):
    topo = build_topology([("a", "b"), ("b", "c")])
    sim = Simulator(seed=2)
    net = Network(topo, sim)
    nr = NrService(sim, Resolver(topo))
    left = FlowManager(NbrLayer(net, net.attach(Endpoint("left", mac_from_index(1)), "a"), nr), window=window)
    right = FlowManager(NbrLayer(net, net.attach(Endpoint("right", mac_from_index(2)), "c"), nr), window=window)
    return sim, left, right


def test_transactions_delivered_over_network():
    sim, left, right = _pair(window=8)
    t1 = left.submit(right, 30_000)
    t2 = left.submit(right, 1_000)
    sim.run()
    assert t1.done and t2.done
    assert right.received[("left", t1.txn_id)].delivered_bytes == 30_000
    assert right.received[("left", t2.txn_id)].complete
    # the small transaction is not stuck behind the large one
    assert t2.completed_at < t1.completed_at
    # one flow reused for both transactions
    assert len(left.flows) == 1


def test_flow_reuse_and_close():
    sim, left, right = _pair()
    f1 = left.open_flow(right)
    assert left.open_flow(right) is f1
    left.close_flow(right)
    assert f1.closed
    assert left.open_flow(right) is not f1


def test_in_order_delivery_per_transaction():
    sim, left, right = _pair(window=16)
    txns = [left.submit(right, 6000) for _ in range(3)]
    sim.run()
    for t in txns:
        seqs = [s for _, sender, tid, s in right.delivery_log if tid == t.txn_id]
        assert seqs == list(range(t.total))
