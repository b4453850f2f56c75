from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import random_topology
from nbr_edge import pathcore
from nbr_edge.eval import (
    E2E_TCP,
    INDIRECTION_MODES,
    NATIVE,
    PROXY,
    SETUP_MODES,
    ScenarioConfig,
    ZipfSampler,
    gain_from_requests,
    group_requests,
    indirection_csv,
    pick_server,
    run_flow_setup,
    run_indirection,
    run_multicast_gain,
    setup_time_closed_form,
    transmission_counts,
    zipf_pmf,
    zipf_sample,
)
from nbr_edge.httpmap import ServicePolicy, admit_request
from nbr_edge.nbr import ConnHandle, Packet
from nbr_edge.resolver import LOCALIZED, NON_LOCALIZED, PRECOMPUTED
from nbr_edge.simnet import BROADCAST_MAC, Endpoint, Network, Simulator, mac_from_index
from nbr_edge.topology import PATH_FORWARDER, PathCache, build_topology, load_topology

SMALL = dict(users=(200,), session_s=60.0, replications=2, catalog_size=100)


# -- popularity --------------------------------------------------------------


def test_zipf_single_item():
    rng = np.random.default_rng(0)
    assert all(zipf_sample(1, a, rng) == 1 for a in (0.5, 1.0, 3.0))


def test_zipf_head_probability():
    harmonic = math.fsum(i ** -0.82 for i in range(1, 1001))
    assert zipf_pmf(1000, 0.82)[0] == pytest.approx(1 / harmonic, rel=1e-12)
    assert zipf_pmf(1000, 0.82).sum() == pytest.approx(1.0)


def test_zipf_empirical_frequencies():
    n, draws = 10, 1_000_000
    ranks = ZipfSampler(n, 1.0).sample(np.random.default_rng(42), draws)
    counts = np.bincount(ranks, minlength=n + 1)[1:]
    expected = np.array([k ** -1.0 for k in range(1, n + 1)])
    expected /= expected.sum()
    assert np.max(np.abs(counts / draws - expected)) < 0.01
    _, p = stats.chisquare(counts, expected * draws)
    assert p > 0.001


def test_zipf_rejects_bad_params():
    with pytest.raises(ValueError):
        zipf_pmf(0, 1.0)
    with pytest.raises(ValueError):
        zipf_pmf(10, 0.0)


# -- gain ------------------------------------------------------------------------


def test_gain_two_colocated_clients_line():
    topo = build_topology([("S", "m"), ("m", "E")])
    uni, multi, gain = gain_from_requests(topo, "S", [(0.0, 1, "E"), (0.1, 1, "E")], tau=0.5)
    assert (uni, multi) == (4, 2)
    assert gain == 2.0


def test_gain_clients_at_different_depths():
    topo = build_topology([("S", "x"), ("x", "y")])
    uni, multi, gain = gain_from_requests(topo, "S", [(0.0, 1, "x"), (0.2, 1, "y")], tau=0.5)
    assert (uni, multi) == (3, 2)
    assert gain == 1.5


def test_gain_window_and_services_split_groups():
    topo = build_topology([("S", "m"), ("m", "E")])
    # different service, or outside the window: no sharing
    assert gain_from_requests(topo, "S", [(0.0, 1, "E"), (0.1, 2, "E")], tau=0.5)[2] == 1.0
    assert gain_from_requests(topo, "S", [(0.0, 1, "E"), (0.6, 1, "E")], tau=0.5)[2] == 1.0
    assert gain_from_requests(topo, "S", [(0.0, 1, "E"), (0.0, 1, "E")], tau=0.0)[2] == 1.0


def flood_count(topo, server, requests, tau):
    """Reference count: push every group's combined PathId through the simulator."""
    sim = Simulator()
    net = Network(topo, sim, jitter=0.0)
    cache = PathCache(topo, net.assignment)
    src = net.attach(Endpoint("srv", mac_from_index(1)), server)
    sinks = {}
    for i, n in enumerate(topo.nodes):
        if n != server:
            sinks[n] = net.attach(Endpoint(f"d{n}", mac_from_index(100 + i)), n)
    # groups by replaying the admission rule in time order
    table, groups = {}, []
    for t, svc, node in sorted(requests):
        adm = admit_request(table, svc, ConnHandle.to(cache.path(server, node).path_id, mac_from_index(7)),
                            t * 1000.0, ServicePolicy(tau))
        if not adm.joined:
            groups.append(adm.group)
    multi = 0
    for g in groups:
        tree = pathcore.combine(c.path_id for c in g.members)
        pid = net.next_packet_id()
        net.inject(src, Packet(src.mac, BROADCAST_MAC, tree, bytes(32), b"", pid, pathcore.checksum(tree)))
        sim.run()
        multi += len(net.core_transmissions(pid))
        assert all(c <= 1 for c in net.node_receptions[pid].values())
    uni = 0
    for t, svc, node in requests:
        p = cache.path(server, node)
        pid = net.next_packet_id()
        if node != server:
            net.inject(src, Packet(src.mac, sinks[node].mac, p.path_id, bytes(32), b"", pid,
                                   pathcore.checksum(p.path_id)))
            sim.run()
        uni += len(net.core_transmissions(pid))
    return uni, multi


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.3, 1.0, 5.0]))
def test_gain_matches_flooding_oracle(seed, tau):
    rng = random.Random(seed)
    topo = random_topology(rng)
    server = rng.choice(topo.nodes)
    requests = [(round(rng.uniform(0, 3), 3), rng.randint(1, 3), rng.choice(topo.nodes))
                for _ in range(rng.randint(1, 20))]
    uni, multi, _ = gain_from_requests(topo, server, requests, tau)
    assert (uni, multi) == flood_count(topo, server, requests, tau)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10, allow_nan=False), st.integers(1, 4)), max_size=40),
       st.sampled_from([0.0, 0.5, 2.0]))
def test_grouping_matches_admission_rule(reqs, tau):
    times = np.array([r[0] for r in reqs], dtype=float)
    services = np.array([r[1] for r in reqs], dtype=np.int64)
    order, starts = group_requests(times, services, tau)
    bounds = list(starts) + [len(reqs)]
    fast = sorted(sorted(order[a:b].tolist()) for a, b in zip(bounds, bounds[1:]))
    table, groups = {}, {}
    for i in sorted(range(len(reqs)), key=lambda i: (reqs[i][0], reqs[i][1], i)):
        adm = admit_request(table, reqs[i][1], i, reqs[i][0], ServicePolicy(tau / 1000.0))
        groups.setdefault(id(adm.group), adm.group)
    slow = sorted(sorted(g.members) for g in groups.values())
    assert fast == slow


def test_transmission_counts_multiword_paths():
    # bits above 64 exercise the multi-word representation
    paths = [0, (1 << 70) | 1, (1 << 200) | (1 << 70)]
    nodes = np.array([1, 2, 2, 1])
    times = np.array([0.0, 0.0, 0.1, 0.2])
    services = np.array([1, 1, 1, 1])
    order, starts = group_requests(times, services, 1.0)
    assert transmission_counts(paths, nodes, order, starts) == (8, 3)


def test_tau_zero_gain_exactly_one():
    report = run_multicast_gain(ScenarioConfig(tau=(0.0,), **SMALL))
    assert all(p.gain == 1.0 and p.ci_low == 1.0 and p.ci_high == 1.0 for p in report.points)
    assert all(d[4] == d[5] for d in report.details)


def test_gain_report_grid_and_csv():
    report = run_multicast_gain(ScenarioConfig(tau=(0.5, 5.0), alpha=(0.82, 1.2), **SMALL))
    assert len(report.points) == 4
    lines = report.to_csv().splitlines()
    assert lines[0] == "users,tau,alpha,gain,ci_low,ci_high"
    assert len(lines) == 5
    for p in report.points:
        assert p.gain >= 1.0 and p.ci_low <= p.gain <= p.ci_high
    # longer catchment never hurts: same request stream, coarser windows
    for a in (0.82, 1.2):
        assert report.point(200, 5.0, a).gain >= report.point(200, 0.5, a).gain


def test_gain_is_deterministic():
    cfg = ScenarioConfig(tau=(0.5,), **SMALL)
    assert run_multicast_gain(cfg).to_csv() == run_multicast_gain(cfg).to_csv()


def test_pick_server_defaults_to_highest_degree():
    topo = load_topology("attmpls")
    assert pick_server(topo) == "13"
    assert pick_server(topo, "CHCG") == "2"


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(alpha=(0.0,)).validate()
    with pytest.raises(ValueError):
        ScenarioConfig(tau=(-1.0,)).validate()
    with pytest.raises(ValueError):
        ScenarioConfig(session_s=0).validate()
    assert ScenarioConfig().digest() == ScenarioConfig().digest()
    assert ScenarioConfig(seed=2).digest() != ScenarioConfig().digest()


# -- flow setup ------------------------------------------------------------------


def chain_topology():
    """F1 - P2 - P3 - F4 with 12 ms links; only F1 and F4 host users."""
    return build_topology([("F1", "P2"), ("P2", "P3"), ("P3", "F4")],
                          roles={"P2": PATH_FORWARDER, "P3": PATH_FORWARDER})


@pytest.mark.parametrize("wireless,expected", [
    (False, {E2E_TCP: 160.0, PROXY: 84.0, NATIVE: 80.0}),
    (True, {E2E_TCP: 188.0, PROXY: 112.0, NATIVE: 94.0}),
])
def test_flow_setup_closed_form(wireless, expected):
    cfg = ScenarioConfig(jitter=0.0, samples=20, wireless=wireless)
    topo = chain_topology()
    for mode, value in expected.items():
        assert run_flow_setup(cfg, mode, topology=topo) == pytest.approx([value] * 20)
        a = 9.0 if wireless else 2.0
        assert setup_time_closed_form(mode, a, 36.0, 2.0) == value


def test_flow_setup_zero_delays():
    cfg = ScenarioConfig(jitter=0.1, samples=5, access_delay_ms=0.0, core_delay_ms=0.0)
    topo = build_topology([("F1", "P2"), ("P2", "F3")], roles={"P2": PATH_FORWARDER}, default_delay_ms=0.0)
    for mode in SETUP_MODES:
        assert run_flow_setup(cfg, mode, topology=topo) == [0.0] * 5


def test_flow_setup_order_every_sample():
    cfg = ScenarioConfig(samples=500, seed=9)
    topo = load_topology("attmpls")
    s = {m: run_flow_setup(cfg, m, topology=topo) for m in SETUP_MODES}
    assert all(n < p < e for n, p, e in zip(s[NATIVE], s[PROXY], s[E2E_TCP]))


def test_flow_setup_rejects_unknown_mode():
    with pytest.raises(ValueError):
        run_flow_setup(ScenarioConfig(samples=1), "quic")


# -- indirection -------------------------------------------------------------------


def test_indirection_without_jitter():
    cfg = ScenarioConfig(jitter=0.0, indirection_samples=5)
    topo = load_topology("attmpls")
    expected = {NON_LOCALIZED: 10.0, LOCALIZED: 0.5, PRECOMPUTED: 0.0}
    for mode, value in expected.items():
        for s in run_indirection(cfg, mode, topology=topo):
            assert s.initial_ms == 10.0
            assert s.indirection_ms == value


def test_indirection_with_jitter_ordering():
    cfg = ScenarioConfig(indirection_samples=30)
    topo = load_topology("attmpls")
    res = {m: run_indirection(cfg, m, topology=topo) for m in INDIRECTION_MODES}
    for mode, samples in res.items():
        for s in samples:
            assert 9.1 - 1e-9 <= s.initial_ms <= 10.9 + 1e-9
    for p, l, n in zip(res[PRECOMPUTED], res[LOCALIZED], res[NON_LOCALIZED]):
        assert p.indirection_ms <= l.indirection_ms < n.indirection_ms
    text = indirection_csv(res)
    assert text.splitlines()[0] == "mode,initial_ms,indirection_ms"
    assert len(text.splitlines()) == 91
