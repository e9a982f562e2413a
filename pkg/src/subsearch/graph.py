"""Labeled undirected graphs, the t/v/e text format, node features and query sampling."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class GraphFormatError(ValueError):
    """Raised for malformed graph text. Carries the offending 1-based line number."""

    def __init__(self, kind: str, lineno: int, message: str):
        self.kind = kind
        self.lineno = lineno
        super().__init__(f"line {lineno}: {kind}: {message}")


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledGraph:
    labels: tuple[int, ...]
    adjacency: tuple[tuple[int, ...], ...]
    _adj_sets: tuple[frozenset, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.labels) != len(self.adjacency):
            raise ValueError("labels and adjacency differ in length")
        n = len(self.labels)
        sets = []
        for u, nbrs in enumerate(self.adjacency):
            s = frozenset(nbrs)
            if len(s) != len(nbrs):
                raise ValueError(f"duplicate edge at node {u}")
            if u in s:
                raise ValueError(f"self-loop at node {u}")
            if list(nbrs) != sorted(nbrs):
                raise ValueError(f"adjacency of node {u} is not sorted")
            for v in nbrs:
                if not 0 <= v < n:
                    raise ValueError(f"neighbor {v} of node {u} out of range")
            sets.append(s)
        for u, s in enumerate(sets):
            for v in s:
                if u not in sets[v]:
                    raise ValueError(f"edge ({u},{v}) is not symmetric")
        object.__setattr__(self, "_adj_sets", tuple(sets))

    @classmethod
    def from_edges(cls, labels: Sequence[int], edges: Iterable[tuple[int, int]]) -> "LabeledGraph":
        n = len(labels)
        nbrs: list[set[int]] = [set() for _ in range(n)]
        for a, b in edges:
            if a == b:
                raise ValueError(f"self-loop at node {a}")
            nbrs[a].add(b)
            nbrs[b].add(a)
        return cls(tuple(int(x) for x in labels), tuple(tuple(sorted(s)) for s in nbrs))

    @property
    def num_nodes(self) -> int:
        return len(self.labels)

    @property
    def num_edges(self) -> int:
        return sum(len(a) for a in self.adjacency) // 2

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.adjacency)

    def degree(self, u: int) -> int:
        return len(self.adjacency[u])

    def neighbors(self, u: int) -> tuple[int, ...]:
        return self.adjacency[u]

    def neighbor_set(self, u: int) -> frozenset:
        return self._adj_sets[u]

    def has_edge(self, u: int, v: int) -> bool:
        return v in self._adj_sets[u]

    def edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u, nbrs in enumerate(self.adjacency) for v in nbrs if u < v]

    def subgraph(self, nodes: Sequence[int]) -> "LabeledGraph":
        """All edges among ``nodes``; node i of the result is ``nodes[i]``."""
        index = {v: i for i, v in enumerate(nodes)}
        edges = []
        for i, v in enumerate(nodes):
            for w in self.adjacency[v]:
                j = index.get(w)
                if j is not None and i < j:
                    edges.append((i, j))
        return LabeledGraph.from_edges([self.labels[v] for v in nodes], edges)

    def is_connected(self) -> bool:
        if self.num_nodes == 0:
            return True
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for w in self.adjacency[u]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == self.num_nodes

    def __eq__(self, other):
        if not isinstance(other, LabeledGraph):
            return NotImplemented
        return self.labels == other.labels and self.adjacency == other.adjacency

    def __hash__(self):
        return hash((self.labels, self.adjacency))


def parse_graph(text: str | bytes) -> LabeledGraph:
    if isinstance(text, bytes):
        text = text.decode("ascii")
    lines = [(i + 1, ln.split()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, toks) for i, toks in lines if toks]
    if not lines:
        raise GraphFormatError("header", 1, "empty input")

    def ints(lineno, toks, count, kind):
        if len(toks) != count + 1:
            raise GraphFormatError(kind, lineno, f"expected {count} fields, got {len(toks) - 1}")
        try:
            return [int(t) for t in toks[1:]]
        except ValueError:
            raise GraphFormatError(kind, lineno, "non-integer field") from None

    lineno, toks = lines[0]
    if toks[0] != "t":
        raise GraphFormatError("header", lineno, "first line must be 't <num_nodes> <num_edges>'")
    n, m = ints(lineno, toks, 2, "header")
    if n < 0 or m < 0:
        raise GraphFormatError("header", lineno, "negative count")
    body = lines[1:]
    v_lines = [x for x in body if x[1][0] == "v"]
    e_lines = [x for x in body if x[1][0] == "e"]
    for ln, tk in body:
        if tk[0] not in ("v", "e"):
            raise GraphFormatError("record", ln, f"unknown record type {tk[0]!r}")
    if len(v_lines) != n:
        ln = v_lines[-1][0] if v_lines else lineno
        raise GraphFormatError("header-mismatch", ln, f"header declares {n} nodes, found {len(v_lines)}")
    if len(e_lines) != m:
        ln = e_lines[-1][0] if e_lines else lineno
        raise GraphFormatError("header-mismatch", ln, f"header declares {m} edges, found {len(e_lines)}")

    labels = []
    declared_deg = []
    for expected, (ln, tk) in enumerate(v_lines):
        vid, label, deg = ints(ln, tk, 3, "vertex")
        if vid != expected:
            raise GraphFormatError("node-id", ln, f"expected node id {expected}, got {vid}")
        labels.append(label)
        declared_deg.append((deg, ln))

    nbrs: list[set[int]] = [set() for _ in range(n)]
    for ln, tk in e_lines:
        a, b = ints(ln, tk, 2, "edge")
        if not (0 <= a < n and 0 <= b < n):
            raise GraphFormatError("edge-range", ln, f"edge ({a},{b}) references unknown node")
        if a == b:
            raise GraphFormatError("self-loop", ln, f"self-loop on node {a}")
        if b in nbrs[a]:
            raise GraphFormatError("duplicate-edge", ln, f"edge ({a},{b}) repeated")
        nbrs[a].add(b)
        nbrs[b].add(a)
    for u, (deg, ln) in enumerate(declared_deg):
        if deg != len(nbrs[u]):
            raise GraphFormatError(
                "degree-mismatch", ln, f"node {u} declares degree {deg} but has {len(nbrs[u])} edges"
            )
    return LabeledGraph(tuple(labels), tuple(tuple(sorted(s)) for s in nbrs))


def serialize_graph(g: LabeledGraph) -> str:
    out = [f"t {g.num_nodes} {g.num_edges}"]
    out.extend(f"v {u} {g.labels[u]} {g.degree(u)}" for u in range(g.num_nodes))
    out.extend(f"e {a} {b}" for a, b in g.edges())
    return "\n".join(out) + "\n"


def read_graph(path) -> LabeledGraph:
    with open(path, "rb") as fh:
        return parse_graph(fh.read())


def write_graph(g: LabeledGraph, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(serialize_graph(g))


def serialize_mapping(mapping: Mapping[int, int]) -> str:
    return "".join(f"m {u} {mapping[u]}\n" for u in sorted(mapping))


def parse_mapping(text: str) -> dict[int, int]:
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        toks = line.split()
        if not toks:
            continue
        if toks[0] != "m" or len(toks) != 3:
            raise GraphFormatError("mapping", lineno, "expected 'm <query_id> <target_id>'")
        mapping[int(toks[1])] = int(toks[2])
    return mapping


# --- node features -----------------------------------------------------------


def ldp_features(g: LabeledGraph, u: int) -> tuple[float, float, float, float, float]:
    """Local degree profile: own degree, then min/max/mean/population-std of neighbor degrees."""
    nbrs = g.neighbors(u)
    if not nbrs:
        return (0.0, 0.0, 0.0, 0.0, 0.0)
    d = [float(g.degree(w)) for w in nbrs]
    mean = sum(d) / len(d)
    var = sum((x - mean) ** 2 for x in d) / len(d)
    return (float(len(nbrs)), min(d), max(d), mean, math.sqrt(var))


def ldp_matrix(g: LabeledGraph) -> np.ndarray:
    return np.array([ldp_features(g, u) for u in range(g.num_nodes)], dtype=np.float64).reshape(-1, 5)


def selected_flags(num_nodes: int, selected: Iterable[int] = ()) -> np.ndarray:
    flags = np.zeros((num_nodes, 2))
    flags[:, 0] = 1.0
    idx = np.fromiter(selected, dtype=np.int64)
    if idx.size:
        flags[idx, 0] = 0.0
        flags[idx, 1] = 1.0
    return flags


def initial_encoding(g: LabeledGraph, selected: Iterable[int] = (), use_ldp: bool = True) -> np.ndarray:
    """Per-node 7-vectors: LDP (or a constant block when ``use_ldp`` is off) then the selected one-hot.

    Labels are deliberately absent; label compatibility is enforced by candidate sets.
    """
    n = g.num_nodes
    base = ldp_matrix(g) if use_ldp else np.ones((n, 5))
    return np.concatenate([base, selected_flags(n, selected)], axis=1)


# --- query sampling ------------------------------------------------------------


@dataclass(frozen=True)
class SampledQuery:
    query: LabeledGraph
    truth_mapping: dict[int, int]
    p_value: float
    seed: int


def p_schedule(i: int, n: int) -> float:
    """Walk parameter of the i-th (1-based) of n queries, log-uniform from 1e-3 to 1e3."""
    if n < 2:
        raise ValueError("p_schedule needs n >= 2")
    if not 1 <= i <= n:
        raise ValueError(f"index {i} outside 1..{n}")
    return 0.001 * math.exp(math.log(10**6) / (n - 1) * (i - 1))


def _exit_distribution(G: LabeledGraph, nodes: list[int], chosen: set[int], cur: int, p: float):
    """Where a walk at ``cur`` first steps onto an unselected node.

    Moves among selected nodes form a transient chain; leaving it is absorption. The
    absorption law from ``cur`` is solved directly instead of simulating every revisit,
    which for small ``p`` can take millions of moves per new node.
    """
    k = len(nodes)
    index = {v: i for i, v in enumerate(nodes)}
    w_old, w_new = 1.0 / p, p
    trans = np.zeros((k, k))
    exits: list[tuple[int, int, float]] = []
    for i, x in enumerate(nodes):
        nbrs = G.neighbors(x)
        if not nbrs:
            continue
        n_old = sum(1 for w in nbrs if w in chosen)
        total = n_old * w_old + (len(nbrs) - n_old) * w_new
        for w in nbrs:
            if w in chosen:
                trans[i, index[w]] += w_old / total
            else:
                exits.append((i, w, w_new / total))
    if not exits:
        return [], []
    # visits[i] = expected visits to node i before absorption, starting from cur
    e = np.zeros(k)
    e[index[cur]] = 1.0
    visits = np.linalg.solve(np.eye(k) - trans.T, e)
    targets = [(nodes[i], w) for i, w, _ in exits]
    probs = np.maximum([visits[i] * r for i, _, r in exits], 0.0)
    return targets, probs / probs.sum()


def random_walk_sample(
    G: LabeledGraph, n: int, p: float, seed: int, max_restarts: int = 100
) -> SampledQuery:
    """Grow an ``n``-node connected query by a revisiting random walk on ``G``.

    A step moves to a neighbor with raw weight ``1/p`` if it is already selected and
    ``p`` otherwise. Revisits never change the node set, so each growth step samples
    the walk's exit from the selected set exactly. The query keeps every ``G`` edge
    among the selected nodes.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if p <= 0:
        raise ValueError("p must be positive")
    if n > G.num_nodes:
        raise SamplingError(f"cannot sample {n} nodes from a {G.num_nodes}-node graph")
    rng = random.Random(seed)
    for _ in range(max_restarts):
        start = rng.randrange(G.num_nodes)
        nodes = [start]
        chosen = {start}
        cur = start
        while len(nodes) < n:
            targets, probs = _exit_distribution(G, nodes, chosen, cur, p)
            if not targets:
                break  # component exhausted
            _, cur = targets[_pick(rng, probs)]
            chosen.add(cur)
            nodes.append(cur)
        if len(nodes) == n:
            return SampledQuery(
                query=G.subgraph(nodes),
                truth_mapping={i: v for i, v in enumerate(nodes)},
                p_value=p,
                seed=seed,
            )
    raise SamplingError(f"walk failed to reach {n} nodes after {max_restarts} restarts")


def _pick(rng: random.Random, probs) -> int:
    r = rng.random()
    acc = 0.0
    for i, q in enumerate(probs):
        acc += q
        if r < acc:
            return i
    return len(probs) - 1


def eccentricity_mean(g: LabeledGraph) -> float:
    """Mean BFS eccentricity over nodes of a connected graph."""
    total = 0
    for s in range(g.num_nodes):
        dist = {s: 0}
        frontier = [s]
        while frontier:
            nxt = []
            for u in frontier:
                for w in g.neighbors(u):
                    if w not in dist:
                        dist[w] = dist[u] + 1
                        nxt.append(w)
            frontier = nxt
        total += max(dist.values())
    return total / g.num_nodes


def isomorphic_check(g1: LabeledGraph, g2: LabeledGraph) -> bool:
    if g1.num_nodes != g2.num_nodes or g1.num_edges != g2.num_edges:
        return False
    if sorted(g1.labels) != sorted(g2.labels):
        return False
    if sorted(g1.degrees) != sorted(g2.degrees):
        return False
    if g1.num_nodes == 0:
        return True
    from .search import find_one_match

    # Equal edge counts turn any non-induced embedding into an isomorphism.
    return find_one_match(g1, g2) is not None
