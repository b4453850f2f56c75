from __future__ import annotations

import random

import pytest

from nbr_edge.topology import build_topology

# lines collected by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_connected_edges(rng: random.Random, max_nodes: int = 10, max_links: int = 20):
    """Random spanning tree plus extra chords; node ids are 'n0'..."""
    n = rng.randint(2, max_nodes)
    nodes = [f"n{i}" for i in range(n)]
    edges = set()
    for i in range(1, n):
        j = rng.randrange(i)
        edges.add((nodes[j], nodes[i]))
    limit = min(max_links, n * (n - 1) // 2)
    target = rng.randint(len(edges), limit)
    while len(edges) < target:
        a, b = rng.sample(nodes, 2)
        if (a, b) not in edges and (b, a) not in edges:
            edges.add((a, b))
    return nodes, sorted(edges)


def random_topology(rng: random.Random, max_nodes: int = 10, max_links: int = 20, delay: float = 12.0):
    nodes, edges = random_connected_edges(rng, max_nodes, max_links)
    return build_topology([(a, b, delay) for a, b in edges], nodes=nodes)


@pytest.fixture
def line3():
    """F1 - F2 - F3."""
    return build_topology([("F1", "F2"), ("F2", "F3")])
