"""Filtering, query ordering and backtracking search for non-induced subgraph matching.

The search is iterative rather than recursive so that a dead end can resume at any
live ancestor (promise-based restarts) without losing completeness: states skipped
by a restart are parked and revisited once the current branch runs dry.
"""

from __future__ import annotations

import logging
import random
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .graph import LabeledGraph

log = logging.getLogger(__name__)


class DisconnectedQueryError(ValueError):
    pass


# --- candidate filtering ---------------------------------------------------------


@dataclass(frozen=True)
class CandidateSets:
    lists: tuple[tuple[int, ...], ...]
    sets: tuple[frozenset, ...] = field(repr=False, compare=False, default=())

    @classmethod
    def build(cls, per_node: Sequence[Sequence[int]]) -> "CandidateSets":
        lists = tuple(tuple(sorted(c)) for c in per_node)
        return cls(lists, tuple(frozenset(c) for c in lists))

    def __getitem__(self, u: int) -> tuple[int, ...]:
        return self.lists[u]

    def __len__(self) -> int:
        return len(self.lists)

    def contains(self, u: int, v: int) -> bool:
        return v in self.sets[u]

    def any_empty(self) -> bool:
        return any(not c for c in self.lists)


def ldf_filter(q: LabeledGraph, G: LabeledGraph) -> CandidateSets:
    by_label: dict[int, list[int]] = {}
    for v, lab in enumerate(G.labels):
        by_label.setdefault(lab, []).append(v)
    out = []
    for u in range(q.num_nodes):
        du = q.degree(u)
        out.append([v for v in by_label.get(q.labels[u], ()) if G.degree(v) >= du])
    return CandidateSets.build(out)


def _neighbor_label_counts(g: LabeledGraph, u: int) -> Counter:
    return Counter(g.labels[w] for w in g.neighbors(u))


def nlf_filter(q: LabeledGraph, G: LabeledGraph, base: CandidateSets) -> CandidateSets:
    """Keep v in base(u) only if v has at least as many neighbors of every label as u."""
    g_counts: dict[int, Counter] = {}
    out = []
    for u in range(q.num_nodes):
        need = _neighbor_label_counts(q, u)
        kept = []
        for v in base[u]:
            have = g_counts.get(v)
            if have is None:
                have = g_counts[v] = _neighbor_label_counts(G, v)
            if all(have[lab] >= cnt for lab, cnt in need.items()):
                kept.append(v)
        out.append(kept)
    return CandidateSets.build(out)


def filter_candidates(q: LabeledGraph, G: LabeledGraph, use_nlf: bool = True) -> CandidateSets:
    C = ldf_filter(q, G)
    return nlf_filter(q, G, C) if use_nlf else C


def order_query_nodes(
    q: LabeledGraph, C: CandidateSets, allow_disconnected: bool = False
) -> list[int]:
    """Least-candidates-first greedy order that stays connected.

    Ties prefer higher query degree, then lower id.
    """
    n = q.num_nodes
    if n == 0:
        return []

    def key(u):
        return (len(C[u]), -q.degree(u), u)

    order = [min(range(n), key=key)]
    placed = {order[0]}
    frontier = set(q.neighbors(order[0]))
    while len(order) < n:
        frontier -= placed
        if not frontier:
            if not allow_disconnected:
                raise DisconnectedQueryError("query graph is disconnected")
            frontier = set(range(n)) - placed
        u = min(frontier, key=key)
        order.append(u)
        placed.add(u)
        frontier.update(q.neighbors(u))
    return order


# --- search problem and states -------------------------------------------------------


class SearchProblem:
    """Everything fixed for one (q, G) search: graphs, candidates, query order."""

    def __init__(self, q: LabeledGraph, G: LabeledGraph, C: CandidateSets, order: Sequence[int]):
        if sorted(order) != list(range(q.num_nodes)):
            raise ValueError("order must be a permutation of the query nodes")
        self.q = q
        self.G = G
        self.C = C
        self.order = tuple(order)
        self.position = {u: i for i, u in enumerate(self.order)}

    @classmethod
    def prepare(cls, q: LabeledGraph, G: LabeledGraph, use_nlf: bool = True) -> "SearchProblem":
        C = filter_candidates(q, G, use_nlf)
        return cls(q, G, C, order_query_nodes(q, C))

    def mapping_of(self, assigned: Sequence[int]) -> dict[int, int]:
        return dict(zip(self.order, assigned))


def local_candidates(problem: SearchProblem, mapping: Mapping[int, int], u: int) -> list[int]:
    """Target nodes ``u`` may take next: in C(u), unused, adjacent to images of u's matched neighbors."""
    G = problem.G
    anchors = [mapping[w] for w in problem.q.neighbors(u) if w in mapping]
    used = set(mapping.values())
    if not anchors:
        return [v for v in problem.C[u] if v not in used]
    anchors.sort(key=G.degree)
    cand_set = problem.C.sets[u]
    pivot = G.neighbors(anchors[0])
    if len(pivot) <= len(cand_set):
        pool = [v for v in pivot if v in cand_set]
    else:
        adj0 = G.neighbor_set(anchors[0])
        pool = [v for v in problem.C[u] if v in adj0]
    rest = [G.neighbor_set(a) for a in anchors[1:]]
    return [v for v in pool if v not in used and all(v in s for s in rest)]


class SearchState:
    __slots__ = ("assigned", "depth", "u", "actions", "next", "parent", "children", "action")

    def __init__(self, assigned, u, actions, parent, action):
        self.assigned: tuple[int, ...] = assigned
        self.depth = len(assigned)
        self.u: Optional[int] = u
        self.actions: tuple[int, ...] = actions
        self.next = 0
        self.parent: Optional[SearchState] = parent
        self.children: Optional[list[SearchState]] = None
        self.action: Optional[int] = action

    @property
    def live(self) -> bool:
        return self.next < len(self.actions)

    @property
    def explored_fraction(self) -> float:
        return self.next / len(self.actions) if self.actions else 1.0

    def __repr__(self):
        return f"SearchState(depth={self.depth}, u={self.u}, next={self.next}/{len(self.actions)})"


def promise_restart_score(state: SearchState, query_size: int) -> float:
    """2:1 blend of normalized depth and the unexplored share of the state's actions."""
    return (2.0 * (state.depth / query_size) + (1.0 - state.explored_fraction)) / 3.0


# --- policies ----------------------------------------------------------------------------

Orderer = Callable[[SearchState, list], list]


class Policy(Protocol):
    name: str

    def start(self, problem: SearchProblem) -> Orderer: ...


class RandomPolicy:
    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def start(self, problem):
        rng = random.Random(self.seed)

        def order(state, actions):
            actions = list(actions)
            rng.shuffle(actions)
            return actions

        return order


class DegreePolicy:
    name = "degree"

    def start(self, problem):
        deg = problem.G.degree
        return lambda state, actions: sorted(actions, key=lambda v: (-deg(v), v))


class IdentityPolicy:
    name = "identity"

    def start(self, problem):
        return lambda state, actions: list(actions)


class TruthPolicy:
    """Tries the known embedding first; with it the first solution needs exactly |V_q| steps."""

    name = "truth"

    def __init__(self, truth_mapping: Mapping[int, int]):
        self.truth = dict(truth_mapping)

    def start(self, problem):
        def order(state, actions):
            target = self.truth.get(state.u)
            return sorted(actions, key=lambda v: (v != target, v))

        return order


# --- backtracking ------------------------------------------------------------------------


@dataclass
class SearchBudget:
    time_limit: float = 0.0  # seconds
    step_limit: int = 0
    solution_cap: Optional[int] = None
    restart_threshold: int = 10
    restart_budget: int = 120

    def __post_init__(self):
        for name in ("time_limit", "step_limit", "restart_threshold", "restart_budget"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.solution_cap is not None and self.solution_cap < 1:
            raise ValueError("solution_cap must be >= 1 or None")


@dataclass
class SearchOutcome:
    matches: list[tuple[int, ...]] = field(default_factory=list)
    first_solution_ms: Optional[float] = None
    first_solution_step: Optional[int] = None
    steps: int = 0
    max_depth: int = 0
    dead_ends: int = 0
    restarts: int = 0
    stopped: str = "complete"
    root: Optional[SearchState] = None

    @property
    def solved(self) -> bool:
        return bool(self.matches)


def backtracking_search(
    problem: SearchProblem,
    policy: Policy,
    budget: Optional[SearchBudget] = None,
    *,
    collect_tree: bool = False,
    restarts: bool = True,
    maximize_promise: bool = True,
    check_invariants: bool = False,
) -> SearchOutcome:
    """Enumerate matches of ``problem.q`` in ``problem.G``.

    A step is one extension of the partial mapping by a node pair. Matches are
    returned as tuples indexed by query node id.
    """
    budget = budget or SearchBudget()
    n = problem.q.num_nodes
    out = SearchOutcome()
    if n == 0 or problem.C.any_empty():
        return out

    order = problem.order
    orderer = policy.start(problem)
    t0 = time.perf_counter()
    deadline = t0 + budget.time_limit if budget.time_limit > 0 else None

    def make_state(assigned, parent, action):
        depth = len(assigned)
        if depth == n:
            return SearchState(assigned, None, (), parent, action)
        mapping = problem.mapping_of(assigned)
        if check_invariants:
            _assert_partial_consistent(problem, mapping)
        u = order[depth]
        state = SearchState(assigned, u, (), parent, action)
        acts = local_candidates(problem, mapping, u)
        if len(acts) > 1:
            ordered = list(orderer(state, acts))
            if sorted(ordered) != acts:
                raise RuntimeError(f"policy {policy.name!r} did not return a permutation of the actions")
            acts = ordered
        state.actions = tuple(acts)
        if collect_tree:
            state.children = []
        return state

    root = make_state((), None, None)
    if collect_tree:
        out.root = root
    orphans: list[SearchState] = []
    dead_since_restart = 0

    def resume(dead: SearchState) -> Optional[SearchState]:
        nonlocal dead_since_restart
        out.dead_ends += 1
        dead_since_restart += 1
        live = []
        a = dead.parent
        while a is not None:
            if a.live:
                live.append(a)
            a = a.parent
        if not live:
            while orphans:
                o = orphans.pop()
                if o.live:
                    return o
            return None
        if (
            restarts
            and len(live) > 1
            and dead_since_restart >= budget.restart_threshold
            and (budget.restart_budget == 0 or out.restarts < budget.restart_budget)
        ):
            scores = [promise_restart_score(s, n) for s in live]
            target = max(scores) if maximize_promise else min(scores)
            # live is deepest-first, so the first hit breaks ties toward depth
            idx = scores.index(target)
            if idx > 0:
                orphans.extend(reversed(live[:idx]))
                out.restarts += 1
                dead_since_restart = 0
                return live[idx]
        return live[0]

    cur: Optional[SearchState] = root
    while cur is not None:
        if not cur.live:
            cur = resume(cur)
            continue
        if budget.step_limit and out.steps >= budget.step_limit:
            out.stopped = "steps"
            break
        if deadline is not None and time.perf_counter() >= deadline:
            out.stopped = "time"
            break
        v = cur.actions[cur.next]
        cur.next += 1
        child = make_state(cur.assigned + (v,), cur, v)
        out.steps += 1
        if collect_tree:
            cur.children.append(child)
        if child.depth > out.max_depth:
            out.max_depth = child.depth
        if child.depth == n:
            match = [0] * n
            for u, w in zip(order, child.assigned):
                match[u] = w
            out.matches.append(tuple(match))
            if out.first_solution_ms is None:
                out.first_solution_ms = (time.perf_counter() - t0) * 1000.0
                out.first_solution_step = out.steps
            if budget.solution_cap is not None and len(out.matches) >= budget.solution_cap:
                out.stopped = "solutions"
                break
            cur = resume(child)
        elif child.actions:
            cur = child
        else:
            cur = resume(child)
    return out


def _assert_partial_consistent(problem: SearchProblem, mapping: Mapping[int, int]) -> None:
    q, G = problem.q, problem.G
    if len(set(mapping.values())) != len(mapping):
        raise AssertionError("partial mapping is not injective")
    for u, v in mapping.items():
        for w in q.neighbors(u):
            if w in mapping and not G.has_edge(v, mapping[w]):
                raise AssertionError(f"query edge ({u},{w}) not preserved")


def solve(
    q: LabeledGraph,
    G: LabeledGraph,
    policy: Policy,
    budget: Optional[SearchBudget] = None,
    *,
    use_nlf: bool = True,
    **kwargs,
) -> SearchOutcome:
    """Filter, order, then search."""
    C = filter_candidates(q, G, use_nlf)
    if C.any_empty():
        return SearchOutcome()
    problem = SearchProblem(q, G, C, order_query_nodes(q, C))
    return backtracking_search(problem, policy, budget, **kwargs)


def find_one_match(q: LabeledGraph, G: LabeledGraph) -> Optional[tuple[int, ...]]:
    C = filter_candidates(q, G)
    if C.any_empty():
        return None
    problem = SearchProblem(q, G, C, order_query_nodes(q, C, allow_disconnected=True))
    out = backtracking_search(problem, DegreePolicy(), SearchBudget(solution_cap=1), restarts=False)
    return out.matches[0] if out.matches else None


# --- independent checks ----------------------------------------------------------------------


def verify_match(q: LabeledGraph, G: LabeledGraph, M) -> bool:
    """Check injectivity, labels and edge preservation of a total mapping.

    ``M`` is a dict or a sequence indexed by query node id.
    """
    if isinstance(M, Mapping):
        if set(M) != set(range(q.num_nodes)):
            return False
        image = [M[u] for u in range(q.num_nodes)]
    else:
        image = list(M)
        if len(image) != q.num_nodes:
            return False
    if len(set(image)) != len(image):
        return False
    for t in image:
        if not 0 <= t < G.num_nodes:
            return False
    for u in range(q.num_nodes):
        if q.labels[u] != G.labels[image[u]]:
            return False
        for w in q.adjacency[u]:
            if image[w] not in G.adjacency[image[u]]:
                return False
    return True


ORACLE_MAX_QUERY = 10
ORACLE_MAX_TARGET = 40


def brute_force_oracle(q: LabeledGraph, G: LabeledGraph) -> tuple[int, set[tuple[int, ...]]]:
    """Exhaustive referee sharing no code with the search path.

    Assignments are extended one query id at a time (0, 1, ...) as a dense numpy join
    over all label-compatible target nodes, dropping rows that repeat a target or miss
    an edge back to an earlier query id. Survivors are re-checked with ``verify_match``.
    """
    if q.num_nodes > ORACLE_MAX_QUERY or G.num_nodes > ORACLE_MAX_TARGET:
        warnings.warn(
            f"brute-force oracle on |V_q|={q.num_nodes}, |V_G|={G.num_nodes} may be very slow",
            stacklevel=2,
        )
    n = q.num_nodes
    if n == 0:
        return 1, {()}
    adj = np.zeros((G.num_nodes, G.num_nodes), dtype=bool)
    for a, b in G.edges():
        adj[a, b] = adj[b, a] = True
    g_labels = np.asarray(G.labels)
    rows = np.zeros((1, 0), dtype=np.int64)
    for u in range(n):
        cands = np.nonzero(g_labels == q.labels[u])[0]
        if cands.size == 0 or rows.shape[0] == 0:
            return 0, set()
        grown = np.concatenate(
            [np.repeat(rows, cands.size, axis=0), np.tile(cands, rows.shape[0])[:, None]], axis=1
        )
        new = grown[:, u]
        ok = np.all(grown[:, :u] != new[:, None], axis=1)
        for w in q.adjacency[u]:
            if w < u:
                ok &= adj[grown[:, w], new]
        rows = grown[ok]
    found = {tuple(int(x) for x in r) for r in rows}
    if not all(verify_match(q, G, m) for m in found):
        raise AssertionError("oracle join kept an invalid assignment")
    return len(found), found
