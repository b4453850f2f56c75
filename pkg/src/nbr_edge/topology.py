"""Transport topology: ingestion, bootstrap bit assignment, path compilation."""

from __future__ import annotations

import heapq
import logging
import re
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .pathcore import PATH_BITS, PathId, ZERO_PATH

log = logging.getLogger(__name__)

L2 = "l2"
PATH_FORWARDER = "path"
NR_ATTACH = "nr"
ROLES = (L2, PATH_FORWARDER, NR_ATTACH)

BUILTIN = {"attmpls": "AttMpls.graphml"}


class TopologyError(ValueError):
    pass


def node_key(node: str):
    """Ordering used everywhere a deterministic node order is needed.

    Numeric ids sort numerically and before any non-numeric id.
    """
    return (0, int(node), "") if node.isdigit() else (1, 0, node)


@dataclass(frozen=True)
class Link:
    a: str
    b: str
    delay_ms: float

    @property
    def key(self) -> tuple[str, str]:
        return (self.a, self.b)

    @property
    def name(self) -> str:
        return f"{self.a}-{self.b}"

    def other(self, node: str) -> str:
        return self.b if node == self.a else self.a


def link_key(u: str, v: str) -> tuple[str, str]:
    return (u, v) if node_key(u) <= node_key(v) else (v, u)


@dataclass
class Topology:
    nodes: tuple[str, ...]
    links: tuple[Link, ...]
    roles: dict[str, str] = field(default_factory=dict)
    labels: dict[str, str] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self._adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        self._links: dict[tuple[str, str], Link] = {}
        for ln in self.links:
            self._adj[ln.a].append(ln.b)
            self._adj[ln.b].append(ln.a)
            self._links[ln.key] = ln
        for n in self._adj:
            self._adj[n].sort(key=node_key)
        for n in self.nodes:
            self.roles.setdefault(n, L2)

    def neighbors(self, node: str) -> list[str]:
        return self._adj[node]

    def link(self, u: str, v: str) -> Link:
        return self._links[link_key(u, v)]

    def has_node(self, node: str) -> bool:
        return node in self._adj

    def resolve(self, name: str) -> str:
        """Map a node id or a unique label to the node id."""
        if name in self._adj:
            return name
        hits = [n for n, lab in self.labels.items() if lab == name]
        if len(hits) == 1:
            return hits[0]
        raise TopologyError(f"unknown node {name!r}")

    @property
    def l2_forwarders(self) -> list[str]:
        return [n for n in self.nodes if self.roles[n] == L2]

    def degree(self, node: str) -> int:
        return len(self._adj[node])

    def hop_distances(self, src: str) -> dict[str, int]:
        dist = {src: 0}
        q = deque([src])
        while q:
            u = q.popleft()
            for v in self._adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        return dist

    def is_connected(self) -> bool:
        return not self.nodes or len(self.hop_distances(self.nodes[0])) == len(self.nodes)


def build_topology(
    edges,
    nodes=(),
    roles=None,
    labels=None,
    default_delay_ms: float = 12.0,
    name: str = "",
    max_links: int = PATH_BITS,
) -> Topology:
    """Build and validate a topology from ``(u, v[, delay_ms])`` tuples."""
    node_set = {str(n) for n in nodes}
    seen: dict[tuple[str, str], Link] = {}
    for e in edges:
        u, v = str(e[0]), str(e[1])
        delay = float(e[2]) if len(e) > 2 and e[2] is not None else default_delay_ms
        node_set.update((u, v))
        if u == v:
            log.warning("ignoring self-loop at %s", u)
            continue
        a, b = link_key(u, v)
        if (a, b) in seen:
            log.warning("ignoring parallel link %s-%s", a, b)
            continue
        if delay < 0:
            raise TopologyError(f"negative delay on link {a}-{b}")
        seen[(a, b)] = Link(a, b, delay)
    if len(seen) > max_links:
        raise TopologyError(f"topology has {len(seen)} links, exceeds {max_links} links")
    roles = {str(k): v for k, v in (roles or {}).items()}
    for n, r in roles.items():
        if r not in ROLES:
            raise TopologyError(f"unknown role {r!r} for node {n}")
    topo = Topology(
        nodes=tuple(sorted(node_set, key=node_key)),
        links=tuple(sorted(seen.values(), key=lambda ln: (node_key(ln.a), node_key(ln.b)))),
        roles=roles,
        labels={str(k): v for k, v in (labels or {}).items()},
        name=name,
    )
    if not topo.nodes:
        raise TopologyError("empty topology")
    if not topo.is_connected():
        raise TopologyError("topology graph is disconnected")
    return topo


_GRAPHML_NS = "{http://graphml.graphdrawing.org/xmlns}"


def _strip(tag: str) -> str:
    return tag.split("}", 1)[-1]


def parse_graphml(text: str, default_delay_ms: float = 12.0) -> Topology:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise TopologyError(f"malformed GraphML: {exc}") from None
    keys = {}
    for k in root.iter():
        if _strip(k.tag) == "key":
            keys[k.get("id")] = k.get("attr.name", k.get("id"))
    graph = next((g for g in root.iter() if _strip(g.tag) == "graph"), None)
    if graph is None:
        raise TopologyError("GraphML document has no <graph> element")

    def data(el):
        return {keys.get(d.get("key"), d.get("key")): (d.text or "").strip()
                for d in el if _strip(d.tag) == "data"}

    nodes, labels, roles, edges = [], {}, {}, []
    name = data(graph).get("Network", "")
    for el in graph:
        tag = _strip(el.tag)
        if tag == "node":
            nid = el.get("id")
            if nid is None:
                raise TopologyError("GraphML node without id")
            nodes.append(nid)
            attrs = data(el)
            if attrs.get("label"):
                labels[nid] = attrs["label"]
            if attrs.get("role"):
                roles[nid] = attrs["role"]
        elif tag == "edge":
            s, t = el.get("source"), el.get("target")
            if s is None or t is None:
                raise TopologyError("GraphML edge without source/target")
            attrs = data(el)
            delay = attrs.get("delay_ms") or attrs.get("delay")
            edges.append((s, t, float(delay) if delay else None))
    unknown = {n for e in edges for n in e[:2]} - set(nodes)
    if unknown:
        raise TopologyError(f"edges reference undeclared nodes {sorted(unknown)}")
    return build_topology(edges, nodes=nodes, roles=roles, labels=labels,
                          default_delay_ms=default_delay_ms, name=name)


def parse_edge_list(text: str, default_delay_ms: float = 12.0) -> Topology:
    edges = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise TopologyError(f"line {lineno}: expected 'nodeA nodeB [delay_ms]'")
        try:
            delay = float(parts[2]) if len(parts) == 3 else None
        except ValueError:
            raise TopologyError(f"line {lineno}: bad delay {parts[2]!r}") from None
        edges.append((parts[0], parts[1], delay))
    return build_topology(edges, default_delay_ms=default_delay_ms)


def load_topology(source, default_delay_ms: float = 12.0) -> Topology:
    """Load a GraphML or edge-list file, or a builtin name such as ``attmpls``."""
    src = str(source)
    if src.lower() in BUILTIN:
        text = resources.files("nbr_edge.data").joinpath(BUILTIN[src.lower()]).read_text()
    else:
        text = Path(src).read_text()
    if re.match(r"\s*<", text):
        return parse_graphml(text, default_delay_ms)
    return parse_edge_list(text, default_delay_ms)


class LinkBitAssignment:
    """Bootstrap mapping of each transport link to one bitfield position."""

    def __init__(self, topology: Topology):
        if len(topology.links) > PATH_BITS:
            raise TopologyError(f"topology exceeds {PATH_BITS} links")
        self.topology = topology
        self.link_bits = {ln.key: i for i, ln in enumerate(topology.links)}
        self.bit_links = {i: k for k, i in self.link_bits.items()}
        self._ports = {
            n: {v: self.link_bits[link_key(n, v)] for v in topology.neighbors(n)}
            for n in topology.nodes
        }

    def bit(self, u: str, v: str) -> int:
        return self.link_bits[link_key(u, v)]

    def port_bits(self, node: str) -> dict[str, int]:
        """Output port (neighbor id) to bit position at ``node``."""
        return self._ports[node]

    def __len__(self):
        return len(self.link_bits)


def assign_bits(topology: Topology) -> LinkBitAssignment:
    return LinkBitAssignment(topology)


@dataclass(frozen=True)
class CompiledPath:
    nodes: tuple[str, ...]
    path_id: PathId

    @property
    def hops(self) -> int:
        return len(self.nodes) - 1

    @property
    def src(self) -> str:
        return self.nodes[0]

    @property
    def dst(self) -> str:
        return self.nodes[-1]


def _dijkstra(topology: Topology, assignment: LinkBitAssignment, src: str):
    # Cost is (hops, bitmask). The bitmask of a simple path is a sum of
    # distinct powers of two, so every path has a distinct cost: shortest
    # paths are unique, symmetric, and closed under sub-paths.
    best = {src: (0, 0)}
    parent: dict[str, str] = {}
    heap = [(0, 0, src)]
    done = set()
    while heap:
        h, m, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, pos in assignment.port_bits(u).items():
            if v in done:
                continue
            cand = (h + 1, m | 1 << pos)
            if v not in best or cand < best[v]:
                best[v] = cand
                parent[v] = u
                heapq.heappush(heap, (cand[0], cand[1], v))
    return best, parent


def shortest_path_tree(topology: Topology, assignment: LinkBitAssignment, src: str) -> dict[str, CompiledPath]:
    """Compiled shortest paths from ``src`` to every node."""
    if not topology.has_node(src):
        raise TopologyError(f"unknown node {src!r}")
    best, parent = _dijkstra(topology, assignment, src)
    out = {}
    for dst, (_, mask) in best.items():
        seq = [dst]
        while seq[-1] != src:
            seq.append(parent[seq[-1]])
        out[dst] = CompiledPath(tuple(reversed(seq)), PathId(mask))
    return out


def shortest_path(topology: Topology, assignment: LinkBitAssignment, src: str, dst: str) -> CompiledPath:
    for n in (src, dst):
        if not topology.has_node(n):
            raise TopologyError(f"unknown node {n!r}")
    if src == dst:
        return CompiledPath((src,), ZERO_PATH)
    tree = shortest_path_tree(topology, assignment, src)
    if dst not in tree:
        raise TopologyError(f"{dst} unreachable from {src}")
    return tree[dst]


class PathCache:
    """Memoized per-source shortest-path trees for one immutable topology."""

    def __init__(self, topology: Topology, assignment: LinkBitAssignment | None = None):
        self.topology = topology
        self.assignment = assignment or assign_bits(topology)
        self._trees: dict[str, dict[str, CompiledPath]] = {}

    def tree(self, src: str) -> dict[str, CompiledPath]:
        if src not in self._trees:
            self._trees[src] = shortest_path_tree(self.topology, self.assignment, src)
        return self._trees[src]

    def path(self, src: str, dst: str) -> CompiledPath:
        if src == dst:
            if not self.topology.has_node(src):
                raise TopologyError(f"unknown node {src!r}")
            return CompiledPath((src,), ZERO_PATH)
        tree = self.tree(src)
        if dst not in tree:
            raise TopologyError(f"{dst} unreachable from {src}")
        return tree[dst]

    def tree_edges(self, path_id: PathId) -> list[tuple[str, str]]:
        return [self.assignment.bit_links[p] for p in path_id.positions()]
