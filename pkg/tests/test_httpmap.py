from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from nbr_edge.httpmap import (
    HttpClient,
    HttpRequest,
    HttpServer,
    Origin,
    ServicePolicy,
    admit_request,
    canonical_uri,
    decode_response,
    derive_request_id,
    encode_response,
    parse_policies,
    respond_group,
)
from nbr_edge.nbr import ADHOC_MULTICAST, REMOTE, ConnHandle, NbrLayer
from nbr_edge.pathcore import encode_path
from nbr_edge.resolver import NrService, Resolver
from nbr_edge.simnet import Endpoint, Network, Simulator, TraceLog, mac_from_index
from nbr_edge.topology import load_topology

headers = st.lists(st.tuples(st.sampled_from(["Accept", "Range", "Cookie", "X-Id"]),
                             st.text(max_size=5)), unique_by=lambda h: h[0], max_size=4)


def test_canonical_uri():
    assert canonical_uri("http://Foo.COM/a?b=1") == "foo.com/a?b=1"
    assert canonical_uri("foo.com") == "foo.com/"


@given(headers, st.randoms())
def test_request_id_ignores_header_order(hs, rnd):
    shuffled = list(hs)
    rnd.shuffle(shuffled)
    designated = ("accept", "range")
    a = HttpRequest("GET", "http://s.com/x", tuple(hs))
    b = HttpRequest("GET", "http://s.com/x", tuple(shuffled))
    assert derive_request_id(a, designated) == derive_request_id(b, designated)


@given(headers, headers)
def test_request_id_ignores_undesignated_headers(h1, h2):
    keep = [h for h in h1 if h[0] == "Range"]
    a = HttpRequest("GET", "http://s.com/x", tuple(keep + [h for h in h1 if h[0] != "Range"]))
    b = HttpRequest("GET", "http://s.com/x", tuple(keep + [h for h in h2 if h[0] != "Range"]))
    assert derive_request_id(a, ("Range",)) == derive_request_id(b, ("Range",))


def test_request_id_distinguishes_resources():
    base = HttpRequest.get("http://s.com/x", Range="0-10")
    assert derive_request_id(base) != derive_request_id(HttpRequest.get("http://s.com/y"))
    assert derive_request_id(base) != derive_request_id(HttpRequest("HEAD", "http://s.com/x"))
    assert derive_request_id(base, ("range",)) != derive_request_id(
        HttpRequest.get("http://s.com/x", Range="5-10"), ("range",))
    assert len(derive_request_id(base)) == 32


def test_request_encoding_roundtrip():
    req = HttpRequest("POST", "http://s.com/x", (("A", "1"),), 10)
    assert HttpRequest.decode(req.encode()) == req
    rid = derive_request_id(req)
    assert decode_response(encode_response(rid, b"body")) == (rid, b"body")
    with pytest.raises(ValueError):
        decode_response(b"R123")


def test_parse_policies():
    pol = parse_policies("# services\nvideo.com 5 on\nnews.com 0.5 off  # fast\n")
    assert pol["video.com"] == ServicePolicy(5.0, True)
    assert pol["news.com"].catchment_ms == 500.0
    with pytest.raises(ValueError, match="line 2"):
        parse_policies("a.com 1 on\nb.com one off\n")
    with pytest.raises(ValueError, match="line 1"):
        parse_policies("a.com 1 maybe\n")


def _conn(i):
    return ConnHandle.to(encode_path([i]), mac_from_index(i))


def test_admission_window_boundaries():
    table = {}
    pol = ServicePolicy(0.5)
    first = admit_request(table, b"r", _conn(1), 0.0, pol)
    assert not first.joined and first.upstream
    edge = admit_request(table, b"r", _conn(2), 500.0, pol)
    assert edge.joined and edge.group is first.group
    late = admit_request(table, b"r", _conn(3), 500.1, pol)
    assert not late.joined and late.group is not first.group


def test_zero_catchment_never_coalesces():
    table = {}
    a = admit_request(table, b"r", _conn(1), 1.0, ServicePolicy(0.0))
    b = admit_request(table, b"r", _conn(2), 1.0, ServicePolicy(0.0))
    assert a.group is not b.group


def test_suppression_controls_upstream():
    for suppression, expected in ((True, False), (False, True)):
        table = {}
        admit_request(table, b"r", _conn(1), 0.0, ServicePolicy(1, suppression))
        assert admit_request(table, b"r", _conn(2), 1.0, ServicePolicy(1, suppression)).upstream is expected


def test_respond_group_kinds():
    table = {}
    g = admit_request(table, b"r", _conn(1), 0.0, ServicePolicy(1)).group
    conn, payload = respond_group(g, b"x")
    assert conn.kind == REMOTE and g.closed
    g2 = admit_request(table, b"r", _conn(1), 10_000.0, ServicePolicy(1)).group
    admit_request(table, b"r", _conn(5), 10_001.0, ServicePolicy(1))
    conn, _ = respond_group(g2, b"x")
    assert conn.kind == ADHOC_MULTICAST and conn.path_id.positions() == [1, 5]


def run_coalescing(k, suppression, spacing_ms=1.0, catchment_s=0.5, nodes=None, extra_idle=()):
    """k clients request the same resource after a warm-up that fills their caches."""
    topo = load_topology("attmpls")
    sim = Simulator(seed=4)
    net = Network(topo, sim)
    nr = NrService(sim, Resolver(topo))
    ep = net.attach(Endpoint("server", mac_from_index(1)), "13")
    origin = Origin()
    server = HttpServer(NbrLayer(net, ep, nr), "video.com", ServicePolicy(catchment_s, suppression), origin)
    nodes = nodes or ["0", "5", "9", "17", "22", "24", "3", "11"]
    clients = []
    for i in range(k):
        cep = net.attach(Endpoint(f"c{i}", mac_from_index(10 + i)), nodes[i % len(nodes)])
        clients.append(HttpClient(NbrLayer(net, cep, nr)))
    idle = [HttpClient(NbrLayer(net, net.attach(Endpoint(f"idle{j}", mac_from_index(100 + j)), n), nr))
            for j, n in enumerate(extra_idle)]
    # warm the caches so requests arrive close together
    for c in clients:
        c.nbr.send_initial("video.com", HttpRequest.get(f"http://video.com/warm/{c.nbr.host_id}").encode())
    sim.run()
    server.closed_groups.clear()
    mark = len(net.trace.records)
    start = sim.now + 1
    for i, c in enumerate(clients):
        sim.schedule_at(start + i * spacing_ms, c.request, HttpRequest.get("http://video.com/movie"))
    sim.run()
    # only the events of the measured phase
    trace = TraceLog()
    trace.records = net.trace.records[mark:]
    return server, clients, trace, origin, idle


@pytest.mark.parametrize("k", [2, 5])
def test_suppression_on_single_upstream(k):
    server, clients, trace, origin, _ = run_coalescing(k, suppression=True)
    movie = [g for g in server.closed_groups if g.request.uri.endswith("movie")]
    assert len(movie) == 1 and len(movie[0].members) == k
    assert origin.invocations == 1 + k  # k warm-up groups plus the movie group
    ups = [r for r in trace.of_kind("upstream_request")]
    assert len(ups) == 1
    assert sum(1 for r in trace.of_kind("response_multicast")) == 1
    for c in clients:
        movies = [r for r in c.responses if r.body.endswith(b"movie")]
        assert len(movies) == 1


@pytest.mark.parametrize("k", [2, 5])
def test_suppression_off_every_request_upstream(k):
    server, clients, trace, origin, _ = run_coalescing(k, suppression=False)
    ups = [r for r in trace.of_kind("upstream_request")]
    assert len(ups) == k
    assert sum(1 for r in trace.of_kind("response_multicast")) == 1
    assert all(len([r for r in c.responses if r.body.endswith(b"movie")]) == 1 for c in clients)


def test_requests_outside_window_get_unicast():
    server, clients, trace, origin, _ = run_coalescing(2, suppression=True, spacing_ms=800.0)
    movie = [g for g in server.closed_groups if g.request.uri.endswith("movie")]
    assert len(movie) == 2
    assert trace.count("response_multicast") == 0


def test_bystander_filters_multicast_response():
    # the idle client sits on a forwarder on the response tree
    server, clients, trace, origin, idle = run_coalescing(2, suppression=True, nodes=["0", "24"],
                                                          extra_idle=["0"])
    assert idle[0].responses == []
    assert idle[0].nbr.filtered >= 1
    assert all(len([r for r in c.responses if r.body.endswith(b"movie")]) == 1 for c in clients)


def test_response_released_at_window_close():
    server, clients, trace, origin, _ = run_coalescing(3, suppression=True, catchment_s=0.5)
    (group,) = [g for g in server.closed_groups if g.request.uri.endswith("movie")]
    (rel,) = [r for r in trace.of_kind("response_multicast")]
    assert rel.time_ms == pytest.approx(group.window_open + 500.0)
