"""Self-supervised training of the search policy from its own search trees."""

from __future__ import annotations

import csv
import logging
import math
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tape, Tensor
from .graph import LabeledGraph, SampledQuery, isomorphic_check, random_walk_sample
from .model import NeuralPolicy, PolicyNet, build_state_context
from .search import SearchBudget, SearchOutcome, SearchProblem, SearchState, backtracking_search

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
CURRICULUM_SIZES = (8, 16, 24, 32, 48, 64, 96, 128)
VALIDATION_SIZES = (8, 16, 32, 64, 128)


@dataclass
class TrainConfig:
    lr: float = 0.0005
    eps: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    clip_norm: float = 0.1
    margin: float = 1.0
    batch_size: int = 32
    batches_per_iter: int = 2
    buffer_capacity: int = 128
    train_step_limit: int = 20000
    train_solution_cap: int = 64
    max_samples_per_search: int = 64
    val_step_limit: int = 2000
    val_every: int = 5
    curriculum: tuple[int, ...] = CURRICULUM_SIZES
    restart_threshold: int = 10
    restart_budget: int = 120
    seed: int = 0


# --- samples ------------------------------------------------------------------------------


@dataclass
class TrainingSample:
    problem: SearchProblem
    assigned: tuple[int, ...]
    u_t: int
    actions: tuple[int, ...]
    positives: list[tuple[int, int, int]]  # (k, u, v)
    negatives: list[tuple[int, int]] = field(default_factory=list)
    future_pools: dict[int, list[tuple[int, int]]] = field(default_factory=dict)

    @property
    def mapping(self) -> dict[int, int]:
        return self.problem.mapping_of(self.assigned)

    def positive_pairs(self) -> list[tuple[int, int]]:
        return [(u, v) for _, u, v in self.positives]


def _solution_reaching(root: SearchState, n: int) -> set[int]:
    """ids of states with a full match somewhere in their retained subtree."""
    reach: set[int] = set()
    order: list[SearchState] = []
    stack = [root]
    while stack:
        s = stack.pop()
        order.append(s)
        stack.extend(s.children or ())
    for s in reversed(order):
        if s.depth == n or any(id(c) in reach for c in (s.children or ())):
            reach.add(id(s))
    return reach


def collect_training_signals(
    outcome: SearchOutcome,
    problem: SearchProblem,
    max_samples: Optional[int] = None,
    seed: int = 0,
) -> list[TrainingSample]:
    """One sample per state on a solution path, with look-ahead positives.

    A state's positives are the pairs chosen at it and at every later state on each
    solution-reaching continuation, tagged with their offset k. Duplicate (k, u, v)
    triples from overlapping continuations are kept once.
    """
    root = outcome.root
    if root is None:
        raise ValueError("search was not run with collect_tree=True")
    n = problem.q.num_nodes
    reach = _solution_reaching(root, n)
    if not reach:
        return []
    on_path = []
    stack = [root]
    while stack:
        s = stack.pop()
        if id(s) not in reach:
            continue
        if s.depth < n:
            on_path.append(s)
        stack.extend(reversed(s.children or ()))
    if max_samples is not None and len(on_path) > max_samples:
        rng = random.Random(seed)
        keep = sorted(rng.sample(range(len(on_path)), max_samples))
        on_path = [on_path[i] for i in keep]

    samples = []
    for s in on_path:
        positives = []
        seen = set()
        pools: dict[int, list[tuple[int, int]]] = {}
        frontier = [(s, 0)]
        while frontier:
            x, k = frontier.pop()
            if k > 0:
                pools.setdefault(k, []).extend((x.u, v) for v in x.actions)
            for c in x.children or ():
                if id(c) not in reach:
                    continue
                key = (k, x.u, c.action)
                if key not in seen:
                    seen.add(key)
                    positives.append(key)
                if c.depth < n:
                    frontier.append((c, k + 1))
        positives.sort()
        pos_by_k = {}
        for k, u, v in positives:
            pos_by_k.setdefault(k, set()).add((u, v))
        future = {
            k: sorted(set(p for p in pairs if p not in pos_by_k.get(k, ())))
            for k, pairs in pools.items()
        }
        samples.append(
            TrainingSample(problem, s.assigned, s.u, tuple(sorted(s.actions)), positives, [], future)
        )
    return samples


def sample_negatives(sample: TrainingSample, seed: int) -> list[tuple[int, int]]:
    """|P| pairs from A_{u_t}, avoiding k=0 positives; falls back to later states' non-positive pairs."""
    rng = random.Random(seed)
    want = len(sample.positives)
    pos0 = {v for k, u, v in sample.positives if k == 0}
    pool = [(sample.u_t, v) for v in sample.actions if v not in pos0]
    if pool:
        if want <= len(pool):
            return rng.sample(pool, want)
        return [rng.choice(pool) for _ in range(want)]
    fallback = [p for k in sorted(sample.future_pools) for p in sample.future_pools[k]]
    if not fallback:
        log.debug("no negative pool at depth %d", len(sample.assigned))
        return []
    return [rng.choice(fallback) for _ in range(want)]


# --- losses -------------------------------------------------------------------------------------


def lookahead_from_probs(pos_prob: Tensor, neg_prob: Optional[Tensor]) -> Tensor:
    """-sum log p over positives - sum log(1 - p) over negatives, probabilities clamped."""
    terms = ad.reduce_sum(ad.log(ad.clip(pos_prob, PROB_CLAMP, 1 - PROB_CLAMP)))
    loss = ad.scale(terms, -1.0)
    if neg_prob is not None and neg_prob.data.size:
        q = ad.clip(neg_prob, PROB_CLAMP, 1 - PROB_CLAMP)
        loss = ad.sub(loss, ad.reduce_sum(ad.log(ad.sub(1.0, q))))
    return loss


def cross_entropy_general(
    pos_prob: Tensor, neg_prob: Tensor, r_pos: float = 1.0, r_neg: float = 0.0
) -> Tensor:
    """Reward-weighted binary cross entropy with explicit R+ / R- (reduces to the simple form at 1/0)."""

    def part(p, r):
        p = ad.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
        a = ad.scale(ad.reduce_sum(ad.log(p)), r)
        b = ad.scale(ad.reduce_sum(ad.log(ad.sub(1.0, p))), 1.0 - r)
        return ad.add(a, b)

    return ad.scale(ad.add(part(pos_prob, r_pos), part(neg_prob, r_neg)), -1.0)


def embedding_violation(hu: Tensor, hv: Tensor) -> Tensor:
    """Per-row ||max(0, hu - hv)||^2; zero when hu is dominated by hv everywhere."""
    return ad.reduce_sum(ad.square(ad.relu(ad.sub(hu, hv))), axis=1)


def max_margin_from_embeddings(
    hu_pos: Tensor, hv_pos: Tensor, hu_neg: Optional[Tensor], hv_neg: Optional[Tensor], margin: float
) -> Tensor:
    loss = ad.reduce_sum(embedding_violation(hu_pos, hv_pos))
    if hu_neg is not None and hu_neg.shape[0]:
        e = embedding_violation(hu_neg, hv_neg)
        loss = ad.add(loss, ad.reduce_sum(ad.relu(ad.sub(margin, e))))
    return loss


@dataclass
class SampleLoss:
    la: Tensor
    mm: Tensor
    excluded: int

    @property
    def total(self) -> Tensor:
        return ad.add(self.la, self.mm)


def sample_losses(
    net: PolicyNet,
    sample: TrainingSample,
    margin: float = 1.0,
    G_intra: Optional[list[Tensor]] = None,
) -> SampleLoss:
    """Both loss terms at the sample's state. Pairs outside the candidate structure are skipped."""
    problem = sample.problem
    mapping = sample.mapping
    ctx = build_state_context(problem, mapping)
    pos = [p for p in sample.positive_pairs() if ctx.allows(*p)]
    neg = [p for p in sample.negatives if ctx.allows(*p)]
    excluded = len(sample.positives) + len(sample.negatives) - len(pos) - len(neg)
    if not pos:
        zero = Tensor(0.0)
        return SampleLoss(zero, zero, excluded)
    q_intra = net.intra_embeddings(problem.q)
    if G_intra is None:
        G_intra = net.intra_embeddings(problem.G)
    pairs = pos + neg
    rows = sorted({v for _, v in pairs})
    row_of = {v: i for i, v in enumerate(rows)}
    hq, hr = net.encode(q_intra, G_intra, ctx, rows)
    hs = net.state_embedding(hq)
    u_idx = np.array([u for u, _ in pairs], dtype=np.int64)
    r_idx = np.array([row_of[v] for _, v in pairs], dtype=np.int64)
    hu = ad.gather_rows(hq, u_idx)
    hv = ad.gather_rows(hr, r_idx)
    probs = ad.sigmoid(net.pair_logits(hu, hv, hs))
    npos = len(pos)
    pi = np.arange(npos)
    ni = np.arange(npos, len(pairs))
    la = lookahead_from_probs(ad.gather_rows(probs, pi), ad.gather_rows(probs, ni) if len(ni) else None)
    mm = max_margin_from_embeddings(
        ad.gather_rows(hu, pi),
        ad.gather_rows(hv, pi),
        ad.gather_rows(hu, ni) if len(ni) else None,
        ad.gather_rows(hv, ni) if len(ni) else None,
        margin,
    )
    return SampleLoss(la, mm, excluded)


def look_ahead_loss(sample: TrainingSample, net: PolicyNet) -> Tensor:
    return sample_losses(net, sample).la


def max_margin_loss(sample: TrainingSample, net: PolicyNet, margin: float = 1.0) -> Tensor:
    return sample_losses(net, sample, margin).mm


def total_loss(sample: TrainingSample, net: PolicyNet, margin: float = 1.0) -> Tensor:
    return sample_losses(net, sample, margin).total


# --- optimizer -----------------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 0.0005
    eps: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    clip_norm: float = 0.1
    step: int = 0
    skipped: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "OptimizerState":
        return cls(cfg.lr, cfg.eps, (cfg.beta1, cfg.beta2), cfg.weight_decay, cfg.clip_norm)


def global_grad_norm(params: ParamStore) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in params.grads.values()))


def clip_gradients(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in params.grads.values():
            g *= factor
    return norm


def adamw_step(params: ParamStore, opt: OptimizerState) -> bool:
    """Clip, then AdamW with bias correction and decoupled weight decay. False if skipped."""
    if not all(np.all(np.isfinite(g)) for g in params.grads.values()):
        opt.skipped += 1
        log.warning("non-finite gradient; optimizer step skipped")
        return False
    clip_gradients(params, opt.clip_norm)
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    decay = 1.0 - opt.lr * opt.weight_decay
    for name, p in params.items():
        g = params.grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if opt.weight_decay:
            p.data *= decay
        p.data -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    params.version += 1
    return True


# --- replay buffer --------------------------------------------------------------------------------


class ReplayBuffer:
    def __init__(self, capacity: int = 128):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def push(self, sample) -> None:
        self._items.append(sample)

    def extend(self, samples: Iterable) -> None:
        for s in samples:
            self.push(s)

    def sample(self, batch_size: int, rng: random.Random) -> list:
        k = min(batch_size, len(self._items))
        return rng.sample(list(self._items), k)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


# --- training loop -------------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    val_reward: float
    iteration: int


@dataclass
class IterationReport:
    iteration: int
    query_size: int = 0
    search_steps: int = 0
    solutions: int = 0
    samples: int = 0
    optimizer_steps: int = 0
    loss_la: float = float("nan")
    loss_mm: float = float("nan")
    loss_total: float = float("nan")
    excluded_pairs: int = 0
    buffer_size: int = 0
    val_reward: Optional[float] = None
    accepted: Optional[bool] = None


LOG_HEADER = ["iter", "loss_la", "loss_mm", "loss_total", "buffer_size", "val_reward", "accepted"]


def _fmt(x: Optional[float]) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def report_row(r: IterationReport) -> list[str]:
    acc = "" if r.accepted is None else str(int(r.accepted))
    return [str(r.iteration), _fmt(r.loss_la), _fmt(r.loss_mm), _fmt(r.loss_total), str(r.buffer_size), _fmt(r.val_reward), acc]


def make_validation_set(
    G: LabeledGraph,
    seed: int,
    sizes: Sequence[int] = VALIDATION_SIZES,
    per_size: int = 3,
    exclude: Sequence[LabeledGraph] = (),
) -> list[SampledQuery]:
    """Sampled queries (``per_size`` of each size), none isomorphic to ``exclude`` or each other."""
    rng = random.Random(seed)
    chosen: list[SampledQuery] = []
    for size in sizes:
        if size > G.num_nodes:
            continue
        got = 0
        tries = 0
        while got < per_size and tries < 50 * per_size:
            tries += 1
            p = 10 ** rng.uniform(-3, 3)
            sq = random_walk_sample(G, size, p, rng.randrange(2**31))
            others = list(exclude) + [c.query for c in chosen]
            if any(isomorphic_check(sq.query, o) for o in others):
                continue
            chosen.append(sq)
            got += 1
    return chosen


def validation_reward(
    net: PolicyNet, G: LabeledGraph, queries: Sequence[SampledQuery], step_limit: int, cfg: Optional[TrainConfig] = None
) -> float:
    """Mean over pairs of the deepest partial match the neural search reaches."""
    cfg = cfg or TrainConfig()
    if not queries:
        return 0.0
    total = 0
    policy = NeuralPolicy(net)
    for sq in queries:
        problem = SearchProblem.prepare(sq.query, G)
        budget = SearchBudget(
            step_limit=step_limit,
            solution_cap=1,
            restart_threshold=cfg.restart_threshold,
            restart_budget=cfg.restart_budget,
        )
        out = backtracking_search(problem, policy, budget)
        total += out.max_depth
    return total / len(queries)


class Trainer:
    """Binds one model to one target graph; single-threaded search/update/validate loop."""

    def __init__(
        self,
        net: PolicyNet,
        G: LabeledGraph,
        cfg: TrainConfig = TrainConfig(),
        validation: Sequence[SampledQuery] = (),
        exclude: Sequence[LabeledGraph] = (),
    ):
        self.net = net
        self.G = G
        self.cfg = cfg
        self.validation = list(validation)
        self.exclude = list(exclude) + [sq.query for sq in self.validation]
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.opt = OptimizerState.from_config(cfg)
        self.rng = random.Random(cfg.seed)
        self.iteration = 0
        self.searches = 0
        self.best: Optional[Checkpoint] = None
        self.reports: list[IterationReport] = []

    def _sample_query(self, size: int) -> SampledQuery:
        for _ in range(20):
            p = 10 ** self.rng.uniform(-3, 3)
            sq = random_walk_sample(self.G, size, p, self.rng.randrange(2**31))
            if not any(isomorphic_check(sq.query, e) for e in self.exclude):
                return sq
        raise RuntimeError("could not sample a training query distinct from held-out queries")

    def search_and_collect(self, sq: SampledQuery) -> tuple[SearchOutcome, list[TrainingSample]]:
        cfg = self.cfg
        problem = SearchProblem.prepare(sq.query, self.G)
        budget = SearchBudget(
            step_limit=cfg.train_step_limit,
            solution_cap=cfg.train_solution_cap or None,
            restart_threshold=cfg.restart_threshold,
            restart_budget=cfg.restart_budget,
        )
        out = backtracking_search(problem, NeuralPolicy(self.net), budget, collect_tree=True)
        samples = collect_training_signals(
            out, problem, cfg.max_samples_per_search, seed=self.rng.randrange(2**31)
        )
        for s in samples:
            s.negatives = sample_negatives(s, self.rng.randrange(2**31))
        out.root = None
        return out, samples

    def train_batch(self, batch: Sequence[TrainingSample]) -> tuple[float, float, int]:
        ps = self.net.params
        ps.zero_grad()
        by_graph: dict[int, list[Tensor]] = {}
        with Tape() as tape:
            la_terms, mm_terms = [], []
            excluded = 0
            for s in batch:
                key = id(s.problem.G)
                if key not in by_graph:
                    by_graph[key] = self.net.intra_embeddings(s.problem.G)
                sl = sample_losses(self.net, s, self.cfg.margin, by_graph[key])
                la_terms.append(sl.la)
                mm_terms.append(sl.mm)
                excluded += sl.excluded
            la = la_terms[0]
            mm = mm_terms[0]
            for t in la_terms[1:]:
                la = ad.add(la, t)
            for t in mm_terms[1:]:
                mm = ad.add(mm, t)
            inv = 1.0 / len(batch)
            la = ad.scale(la, inv)
            mm = ad.scale(mm, inv)
            loss = ad.add(la, mm)
        if loss.tracked:
            tape.backward(loss, ps)
            adamw_step(ps, self.opt)
        return la.item(), mm.item(), excluded

    def train_iteration(self) -> IterationReport:
        cfg = self.cfg
        self.iteration += 1
        rep = IterationReport(self.iteration)
        size = self.rng.choice([s for s in cfg.curriculum if s <= self.G.num_nodes])
        sq = self._sample_query(size)
        out, samples = self.search_and_collect(sq)
        self.searches += 1
        rep.query_size = size
        rep.search_steps = out.steps
        rep.solutions = len(out.matches)
        rep.samples = len(samples)
        if not samples:
            log.info("iteration %d: search yielded no training signal", self.iteration)
        self.buffer.extend(samples)
        las, mms = [], []
        if len(self.buffer):
            for _ in range(cfg.batches_per_iter):
                batch = self.buffer.sample(cfg.batch_size, self.rng)
                la, mm, exc = self.train_batch(batch)
                las.append(la)
                mms.append(mm)
                rep.excluded_pairs += exc
                rep.optimizer_steps += 1
        if las:
            rep.loss_la = float(np.mean(las))
            rep.loss_mm = float(np.mean(mms))
            rep.loss_total = rep.loss_la + rep.loss_mm
        rep.buffer_size = len(self.buffer)
        if cfg.val_every and self.validation and self.searches % cfg.val_every == 0:
            best = self.validate_and_checkpoint()
            rep.val_reward = self.last_val_reward
            rep.accepted = best.iteration == self.iteration
        self.reports.append(rep)
        return rep

    def initial_checkpoint(self) -> Checkpoint:
        reward = self.evaluate_validation()
        self.best = Checkpoint(self.net.params.snapshot(), reward, self.iteration)
        self.last_val_reward = reward
        return self.best

    def evaluate_validation(self) -> float:
        return validation_reward(self.net, self.G, self.validation, self.cfg.val_step_limit, self.cfg)

    def validate_and_checkpoint(self) -> Checkpoint:
        """Keep the new parameters only on strict reward improvement; otherwise restore the best."""
        if self.best is None:
            return self.initial_checkpoint()
        reward = self.evaluate_validation()
        self.last_val_reward = reward
        if reward > self.best.val_reward:
            self.best = Checkpoint(self.net.params.snapshot(), reward, self.iteration)
        else:
            self.net.params.restore(self.best.params)
        return self.best

    def fit(self, iterations: int, log_path=None) -> list[IterationReport]:
        if self.validation and self.best is None:
            self.initial_checkpoint()
        writer = None
        fh = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_HEADER)
        try:
            for _ in range(iterations):
                rep = self.train_iteration()
                log.info(
                    "iter %d size=%d steps=%d sols=%d samples=%d loss=%.4f buf=%d val=%s",
                    rep.iteration, rep.query_size, rep.search_steps, rep.solutions, rep.samples,
                    rep.loss_total, rep.buffer_size, rep.val_reward,
                )
                if writer:
                    writer.writerow(report_row(rep))
                    fh.flush()
        finally:
            if fh:
                fh.close()
        return self.reports


# --- gradient diagnostics --------------------------------------------------------------------


def synthetic_target(num_nodes: int, attachment: int, num_labels: int, seed: int) -> LabeledGraph:
    """Preferential-attachment target with uniformly random labels."""
    import networkx as nx

    g = nx.barabasi_albert_graph(num_nodes, attachment, seed=seed)
    rng = random.Random(seed)
    return LabeledGraph.from_edges([rng.randrange(num_labels) for _ in range(num_nodes)], g.edges())


def gradient_check(seed: int, num_coords: int = 200, K: int = 2, D: int = 8) -> ad.GradCheckResult:
    """Finite-difference check of the total loss on a small seeded instance.

    Picks the sample with the most negatives so both loss terms are active.
    """
    from .model import EncoderConfig
    from .search import RandomPolicy

    G = synthetic_target(60, 2, 3, seed=1)
    net = PolicyNet(EncoderConfig(K=K, D=D), seed=seed)
    samples: list[TrainingSample] = []
    attempt = 0
    while not any(s.negatives for s in samples):
        sq = random_walk_sample(G, 6, 1.0, seed=seed + 7919 * attempt)
        problem = SearchProblem.prepare(sq.query, G)
        out = backtracking_search(
            problem, RandomPolicy(seed), SearchBudget(step_limit=200, solution_cap=5), collect_tree=True
        )
        samples = collect_training_signals(out, problem)
        for s in samples:
            s.negatives = sample_negatives(s, seed)
        attempt += 1
    sample = max(samples, key=lambda s: len(s.negatives))
    return ad.finite_difference_check(
        lambda: sample_losses(net, sample).total, net.params, num_coords=num_coords, seed=seed
    )
