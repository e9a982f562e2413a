import random

import networkx as nx
import pytest
from hypothesis import settings
from networkx.algorithms import isomorphism

from subsearch.graph import LabeledGraph

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_graph(rng: random.Random, n: int, num_labels: int, edge_p: float) -> LabeledGraph:
    labels = [rng.randrange(num_labels) for _ in range(n)]
    edges = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < edge_p]
    return LabeledGraph.from_edges(labels, edges)


def random_connected_query(rng: random.Random, n: int, num_labels: int, extra_p: float = 0.3) -> LabeledGraph:
    """Random spanning tree plus extra edges, so the query is connected."""
    labels = [rng.randrange(num_labels) for _ in range(n)]
    edges = {(rng.randrange(i), i) for i in range(1, n)}
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < extra_p:
                edges.add((a, b))
    return LabeledGraph.from_edges(labels, edges)


def oracle_corpus(count: int = 200, seed: int = 20240601):
    """Seeded (q, G) pairs with |V_q| in [2,6], |V_G| in [6,15], at most 3 labels."""
    rng = random.Random(seed)
    pairs = []
    for _ in range(count):
        k = rng.randint(1, 3)
        q = random_connected_query(rng, rng.randint(2, 6), k)
        G = random_graph(rng, rng.randint(6, 15), k, rng.uniform(0.25, 0.7))
        pairs.append((q, G))
    return pairs


def to_nx(g: LabeledGraph) -> nx.Graph:
    h = nx.Graph()
    for u, lab in enumerate(g.labels):
        h.add_node(u, label=lab)
    h.add_edges_from(g.edges())
    return h


def networkx_matches(q: LabeledGraph, G: LabeledGraph) -> set[tuple[int, ...]]:
    """Non-induced embeddings via networkx's monomorphism matcher (independent referee)."""
    gm = isomorphism.GraphMatcher(
        to_nx(G), to_nx(q), node_match=lambda a, b: a["label"] == b["label"]
    )
    out = set()
    for m in gm.subgraph_monomorphisms_iter():
        inv = {qu: gv for gv, qu in m.items()}
        out.add(tuple(inv[u] for u in range(q.num_nodes)))
    return out


def triangle(label: int = 0) -> LabeledGraph:
    return LabeledGraph.from_edges([label] * 3, [(0, 1), (1, 2), (0, 2)])


def path3(label: int = 0) -> LabeledGraph:
    return LabeledGraph.from_edges([label] * 3, [(0, 1), (1, 2)])


@pytest.fixture(scope="session")
def corpus():
    return oracle_corpus()


# acceptance criteria report lines, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
