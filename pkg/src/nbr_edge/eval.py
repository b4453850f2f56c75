"""Experiment drivers: multicast gain, flow setup time, service indirection."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import random
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .nbr import NbrLayer
from .resolver import CACHE_MODES, LOCALIZED, NON_LOCALIZED, PRECOMPUTED, NrService, Resolver
from .simnet import Endpoint, LinkModel, Network, Simulator, mac_from_index
from .topology import PathCache, Topology, load_topology

log = logging.getLogger(__name__)

E2E_TCP = "e2e_tcp"
PROXY = "proxy"
NATIVE = "native"
SETUP_MODES = (E2E_TCP, PROXY, NATIVE)
INDIRECTION_MODES = (NON_LOCALIZED, LOCALIZED, PRECOMPUTED)

GAIN_COLUMNS = ("users", "tau", "alpha", "gain", "ci_low", "ci_high")
GAIN_DETAIL_COLUMNS = ("users", "tau", "alpha", "replication", "unicast", "multicast", "gain")
FLOWSETUP_COLUMNS = ("mode", "sample_ms")
INDIRECTION_COLUMNS = ("mode", "initial_ms", "indirection_ms")


@dataclass
class ScenarioConfig:
    topology: str = "attmpls"
    catalog_size: int = 1000
    alpha: tuple[float, ...] = (0.82,)
    users: tuple[int, ...] = (1000, 2000, 3000, 4000, 5000)
    session_s: float = 900.0
    tau: tuple[float, ...] = (0.5, 5.0)
    # requests per user per second
    request_rate: float = 1.0
    # empty: the highest-degree L2 forwarder
    server_node: str = ""
    access_delay_ms: float = 2.0
    core_delay_ms: float = 12.0
    wireless_access_delay_ms: float = 9.0
    wireless: bool = False
    jitter: float = 0.10
    nr_rtt_ms: float = 9.0
    nr_processing_ms: float = 1.0
    local_compute_ms: float = 0.5
    update_at_ms: float = 100.0
    samples: int = 10000
    indirection_samples: int = 100
    seed: int = 1
    replications: int = 5
    workers: int = 1

    def validate(self) -> None:
        if self.catalog_size < 1:
            raise ValueError("catalog_size must be >= 1")
        if any(a <= 0 for a in self.alpha):
            raise ValueError("alpha must be > 0")
        if any(u < 1 for u in self.users):
            raise ValueError("users must be >= 1")
        if any(t < 0 for t in self.tau):
            raise ValueError("tau must be >= 0")
        for f in ("session_s", "request_rate"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        for f in ("access_delay_ms", "core_delay_ms", "wireless_access_delay_ms", "jitter",
                  "nr_rtt_ms", "nr_processing_ms", "local_compute_ms"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")
        if self.jitter >= 1:
            raise ValueError("jitter must be < 1")
        if self.replications < 1 or self.samples < 1 or self.indirection_samples < 1:
            raise ValueError("replications and sample counts must be >= 1")

    def canonical(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={v!r}" if not isinstance(v, str) else f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def load_topology(self) -> Topology:
        return load_topology(self.topology, default_delay_ms=self.core_delay_ms)


# -- popularity ---------------------------------------------------------------


def zipf_pmf(n: int, alpha: float) -> np.ndarray:
    """P(rank k) = k^-alpha / sum_i i^-alpha for k = 1..n."""
    if n < 1 or alpha <= 0:
        raise ValueError("zipf needs n >= 1 and alpha > 0")
    w = np.arange(1, n + 1, dtype=float) ** -alpha
    return w / w.sum()


class ZipfSampler:
    def __init__(self, n: int, alpha: float):
        self.n = n
        self.alpha = alpha
        self.pmf = zipf_pmf(n, alpha)
        self.cdf = np.cumsum(self.pmf)
        self.cdf[-1] = 1.0

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Ranks in 1..n."""
        u = rng.random(size)
        return np.searchsorted(self.cdf, u, side="right") + 1


def zipf_sample(n: int, alpha: float, rng: np.random.Generator) -> int:
    return int(ZipfSampler(n, alpha).sample(rng))


# -- multicast gain -------------------------------------------------------------


@dataclass
class RequestTrace:
    times: np.ndarray     # seconds
    services: np.ndarray  # catalog rank
    nodes: np.ndarray     # index into the forwarder list


def generate_requests(n_forwarders: int, users: int, rate: float, session_s: float,
                      sampler: ZipfSampler, rng: np.random.Generator) -> RequestTrace:
    """Superposed per-user Poisson arrivals with Zipf service choice."""
    user_nodes = rng.integers(0, n_forwarders, users)
    n = rng.poisson(users * rate * session_s)
    times = rng.uniform(0.0, session_s, n)
    who = rng.integers(0, users, n)
    services = sampler.sample(rng, n)
    return RequestTrace(times, services, user_nodes[who])


def group_requests(times, services, tau: float):
    """Greedy catchment windows per service.

    Returns ``(order, starts)``: the (service, time) sort order and the
    index in that order where each group begins. A window opens at its
    first request; later requests join while ``t <= open + tau``.
    ``tau == 0`` never coalesces.
    """
    order = np.lexsort((times, services))
    svc = services[order].tolist()
    t = times[order].tolist()
    starts = []
    cur = None
    close = -math.inf
    for i in range(len(svc)):
        s, x = svc[i], t[i]
        if s != cur or x > close:
            starts.append(i)
            cur = s
            close = x + tau if tau > 0 else -math.inf
    return order, np.asarray(starts, dtype=np.int64)


def _words(path_ints: list[int], n_words: int) -> np.ndarray:
    mask = (1 << 64) - 1
    return np.array([[(p >> (64 * w)) & mask for w in range(n_words)] for p in path_ints], dtype=np.uint64)


def transmission_counts(node_paths: list[int], nodes: np.ndarray, order, starts) -> tuple[int, int]:
    """(unicast, multicast) link transmissions for one grouped request trace.

    ``node_paths[i]`` is the path bitfield from the server to forwarder i.
    Unicast pays every request's path; multicast pays each group's OR.
    """
    if len(nodes) == 0:
        return 0, 0
    n_words = max(1, math.ceil(max(p.bit_length() for p in node_paths) / 64))
    table = _words(node_paths, n_words)
    per_node = np.bitwise_count(table).sum(axis=1).astype(np.int64)
    unicast = int(per_node[nodes].sum())
    bits = table[nodes[order]]
    merged = np.bitwise_or.reduceat(bits, starts, axis=0)
    multicast = int(np.bitwise_count(merged).sum())
    return unicast, multicast


def gain_ratio(unicast: int, multicast: int) -> float:
    if multicast == 0:
        return 1.0
    return unicast / multicast


def gain_from_requests(topology: Topology, server: str, requests, tau: float,
                       paths: PathCache | None = None) -> tuple[int, int, float]:
    """Gain for an explicit list of ``(time_s, service, node)`` requests."""
    paths = paths or PathCache(topology)
    forwarders = list(topology.nodes)
    index = {n: i for i, n in enumerate(forwarders)}
    node_paths = [paths.path(server, n).path_id.bits for n in forwarders]
    times = np.array([r[0] for r in requests], dtype=float)
    services = np.array([r[1] for r in requests], dtype=np.int64)
    nodes = np.array([index[r[2]] for r in requests], dtype=np.int64)
    order, starts = group_requests(times, services, tau)
    uni, multi = transmission_counts(node_paths, nodes, order, starts)
    return uni, multi, gain_ratio(uni, multi)


def pick_server(topology: Topology, requested: str = "") -> str:
    if requested:
        return topology.resolve(requested)
    from .topology import node_key
    cands = topology.l2_forwarders or list(topology.nodes)
    return min(cands, key=lambda n: (-topology.degree(n), node_key(n)))


def _stream_seed(seed: int, rep: int, users: int, alpha: float) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, rep, users, int(round(alpha * 1_000_000))])


def _gain_cell(args):
    config, users, alpha, rep = args
    topo = config.load_topology()
    server = pick_server(topo, config.server_node)
    paths = PathCache(topo)
    forwarders = topo.l2_forwarders or list(topo.nodes)
    node_paths = [paths.path(server, n).path_id.bits for n in forwarders]
    rng = np.random.default_rng(_stream_seed(config.seed, rep, users, alpha))
    trace = generate_requests(len(forwarders), users, config.request_rate, config.session_s,
                              ZipfSampler(config.catalog_size, alpha), rng)
    out = []
    for tau in config.tau:
        order, starts = group_requests(trace.times, trace.services, tau)
        uni, multi = transmission_counts(node_paths, trace.nodes, order, starts)
        out.append((users, tau, alpha, rep, uni, multi, gain_ratio(uni, multi)))
    return out


@dataclass
class GainPoint:
    users: int
    tau: float
    alpha: float
    gain: float
    ci_low: float
    ci_high: float
    unicast: float
    multicast: float
    replicate_gains: list[float] = field(default_factory=list)


@dataclass
class GainReport:
    points: list[GainPoint]
    details: list[tuple]

    def point(self, users, tau, alpha) -> GainPoint:
        for p in self.points:
            if p.users == users and p.tau == tau and p.alpha == alpha:
                return p
        raise KeyError((users, tau, alpha))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GAIN_COLUMNS)
        for p in self.points:
            w.writerow((p.users, repr(p.tau), repr(p.alpha), repr(p.gain), repr(p.ci_low), repr(p.ci_high)))
        return buf.getvalue()

    def detail_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(GAIN_DETAIL_COLUMNS)
        for users, tau, alpha, rep, uni, multi, g in self.details:
            w.writerow((users, repr(tau), repr(alpha), rep, uni, multi, repr(g)))
        return buf.getvalue()


def confidence_interval(values, level: float = 0.95) -> tuple[float, float]:
    m = statistics.fmean(values)
    if len(values) < 2:
        return m, m
    half = stats.t.ppf(0.5 + level / 2, len(values) - 1) * statistics.stdev(values) / math.sqrt(len(values))
    return m - half, m + half


def run_multicast_gain(config: ScenarioConfig) -> GainReport:
    config.validate()
    cells = [(config, u, a, r) for u in config.users for a in config.alpha for r in range(config.replications)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as ex:
            results = list(ex.map(_gain_cell, cells))
    else:
        results = [_gain_cell(c) for c in cells]
    details = sorted((row for rows in results for row in rows), key=lambda r: (r[0], r[1], r[2], r[3]))
    points = []
    for users in config.users:
        for tau in config.tau:
            for alpha in config.alpha:
                rows = [d for d in details if d[:3] == (users, tau, alpha)]
                gains = [d[6] for d in rows]
                lo, hi = confidence_interval(gains)
                points.append(GainPoint(users, tau, alpha, statistics.fmean(gains), lo, hi,
                                        statistics.fmean(d[4] for d in rows),
                                        statistics.fmean(d[5] for d in rows), gains))
    return GainReport(points, details)


# -- flow setup -------------------------------------------------------------------


CLIENT, CORE, SERVER = "client", "core", "server"


def _message_sequence(mode: str) -> list[tuple[str, ...]]:
    """Segments crossed by each message of the exchange, in order."""
    full = (CLIENT, CORE, SERVER)
    if mode == E2E_TCP:
        # SYN, SYN-ACK, ACK+request, response: all end to end
        return [full] * 4
    if mode == PROXY:
        # handshake ends at the ingress proxy; request and response cross the core
        return [(CLIENT,), (CLIENT,), (CLIENT,), (CORE, SERVER), (CORE, SERVER), (CLIENT,)]
    if mode == NATIVE:
        return [full] * 2
    raise ValueError(f"unknown flow setup mode {mode!r}")


def _traversal_draws(rng: random.Random, legs: dict[str, list[LinkModel]], n: int = 4) -> dict[str, list[float]]:
    """``n`` jittered traversal times per segment.

    Every mode consumes the k-th traversal of a segment from the same
    draw, so modes differ only by the traversals they add.
    """
    out = {k: [] for k in legs}
    for _ in range(n):
        for k, hops in legs.items():
            out[k].append(sum(h.sample(rng) for h in hops))
    return out


def _run_exchange(sim: Simulator, messages, draws: dict[str, list[float]]) -> float:
    """Send the messages back to back on ``sim``; returns elapsed ms."""
    start = sim.now
    used = {k: 0 for k in draws}
    done = []

    def step(i):
        if i == len(messages):
            done.append(sim.now)
            return
        delay = 0.0
        for seg in messages[i]:
            delay += draws[seg][used[seg]]
            used[seg] += 1
        sim.schedule(delay, step, i + 1)

    step(0)
    sim.run()
    return done[0] - start


def random_pairs(topology: Topology, n: int, seed: int) -> list[tuple[str, str]]:
    rng = random.Random(f"{seed}:pairs")
    nodes = topology.l2_forwarders or list(topology.nodes)
    if len(nodes) < 2:
        return [(nodes[0], nodes[0])] * n
    return [tuple(rng.sample(nodes, 2)) for _ in range(n)]


def run_flow_setup(config: ScenarioConfig, mode: str, pairs=None, topology: Topology | None = None) -> list[float]:
    """Time from initiation until the first content byte reaches the client."""
    if mode not in SETUP_MODES:
        raise ValueError(f"unknown flow setup mode {mode!r}")
    topo = topology or config.load_topology()
    paths = PathCache(topo)
    pairs = pairs if pairs is not None else random_pairs(topo, config.samples, config.seed)
    a_delay = config.wireless_access_delay_ms if config.wireless else config.access_delay_ms
    messages = _message_sequence(mode)
    sim = Simulator(seed=config.seed)
    out = []
    for i, (ingress, egress) in enumerate(pairs):
        p = paths.path(ingress, egress)
        legs = {
            CLIENT: [LinkModel(a_delay, config.jitter)],
            CORE: [LinkModel(topo.link(u, v).delay_ms, config.jitter) for u, v in zip(p.nodes, p.nodes[1:])],
            SERVER: [LinkModel(config.access_delay_ms, config.jitter)],
        }
        draws = _traversal_draws(random.Random(f"{config.seed}:setup:{i}"), legs)
        out.append(_run_exchange(sim, messages, draws))
    return out


def setup_time_closed_form(mode: str, a: float, c: float, b: float) -> float:
    if mode == E2E_TCP:
        return 4 * (a + c + b)
    if mode == PROXY:
        return 3 * a + 2 * (c + b) + a
    if mode == NATIVE:
        return 2 * (a + c + b)
    raise ValueError(mode)


def flowsetup_csv(samples: dict[str, list[float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FLOWSETUP_COLUMNS)
    for mode in SETUP_MODES:
        for s in samples.get(mode, ()):
            w.writerow((mode, repr(s)))
    return buf.getvalue()


# -- service indirection ------------------------------------------------------------


@dataclass(frozen=True)
class IndirectionSample:
    mode: str
    initial_ms: float
    indirection_ms: float


def indirection_once(topology: Topology, config: ScenarioConfig, mode: str, seed,
                     client_node: str, old_node: str, new_node: str, service: str = "foo1.com") -> IndirectionSample:
    """One discovery followed by a service move; measures both latencies.

    A new transaction arrives together with the path update, the worst
    case for every mode.
    """
    sim = Simulator(seed=seed)
    net = Network(topology, sim, access_delay_ms=config.access_delay_ms, jitter=config.jitter)
    nr = NrService(sim, Resolver(topology), config.nr_rtt_ms, config.nr_processing_ms, config.jitter)
    host_ep = net.attach(Endpoint("instance", mac_from_index(1)), old_node)
    client_ep = net.attach(Endpoint("proxy", mac_from_index(2)), client_node)
    host = NbrLayer(net, host_ep, nr)
    client = NbrLayer(net, client_ep, nr, cache_mode=mode, local_compute_ms=config.local_compute_ms)
    host.subscribe(service, lambda conn, payload, pkt: None)
    first = client.send_initial(service, b"GET /")
    second = []

    def on_update(update):
        client._on_update(update)
        second.append(client.send_initial(service, b"GET /"))

    nr.attach_listener(client.host_id, on_update)
    sim.schedule_at(config.update_at_ms, host.move_to, new_node)
    sim.run()
    if first.setup_ms is None or not second or second[0].setup_ms is None:
        raise RuntimeError("indirection scenario did not complete")
    return IndirectionSample(mode, first.setup_ms, second[0].setup_ms)


def run_indirection(config: ScenarioConfig, mode: str, topology: Topology | None = None) -> list[IndirectionSample]:
    if mode not in CACHE_MODES:
        raise ValueError(f"unknown indirection mode {mode!r}")
    topo = topology or config.load_topology()
    nodes = topo.l2_forwarders or list(topo.nodes)
    rng = random.Random(f"{config.seed}:indirection")
    out = []
    for i in range(config.indirection_samples):
        client, old, new = (rng.sample(nodes, 3) if len(nodes) >= 3 else (nodes[0], nodes[0], nodes[-1]))
        out.append(indirection_once(topo, config, mode, f"{config.seed}:{i}", client, old, new))
    return out


def indirection_csv(samples: dict[str, list[IndirectionSample]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INDIRECTION_COLUMNS)
    for mode in INDIRECTION_MODES:
        for s in samples.get(mode, ()):
            w.writerow((s.mode, repr(s.initial_ms), repr(s.indirection_ms)))
    return buf.getvalue()
