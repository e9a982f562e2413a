"""Query-conditioned matching network and the neural search policy built on it.

Per layer the encoder runs GraphSAGE propagation on each graph (state independent,
so cached per search) and then attention matching between query and target nodes
restricted to the candidate structure of the current search state. Layer outputs
are max-pooled across layers and layer-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .graph import LabeledGraph, initial_encoding, selected_flags
from .search import SearchProblem, SearchState, local_candidates

INPUT_DIM = 7
FLAG_DIM = 2


@dataclass(frozen=True)
class EncoderConfig:
    K: int = 8
    D: int = 16
    F: int = 32
    proj: int = 16
    att_hidden: tuple[int, ...] = (4,)
    policy_hidden: tuple[int, ...] = (32, 16, 8)
    use_ldp: bool = True
    query_readout: bool = True

    def __post_init__(self):
        if min(self.K, self.D, self.F, self.proj) < 1:
            raise ValueError("K, D, F and proj must be positive")

    @property
    def policy_input(self) -> int:
        return self.F + self.D

    def to_line(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = int(v)
            parts.append(f"{f.name}={v}")
        return "CFG " + " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "EncoderConfig":
        toks = line.split()
        if not toks or toks[0] != "CFG":
            raise ValueError("checkpoint is missing its CFG line")
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for tok in toks[1:]:
            key, _, raw = tok.partition("=")
            if key not in kinds:
                raise ValueError(f"unknown CFG key {key!r}")
            default = getattr(cls(), key)
            if isinstance(default, bool):
                kw[key] = bool(int(raw))
            elif isinstance(default, tuple):
                kw[key] = tuple(int(x) for x in raw.split(",") if x)
            else:
                kw[key] = int(raw)
        return cls(**kw)


def _graph_arrays(g: LabeledGraph):
    arrays = g.__dict__.get("_nn_arrays")
    if arrays is None:
        src = np.fromiter((u for u, nb in enumerate(g.adjacency) for _ in nb), dtype=np.int64)
        dst = np.fromiter((w for nb in g.adjacency for w in nb), dtype=np.int64)
        deg = np.array(g.degrees, dtype=np.float64).reshape(-1, 1)
        inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        arrays = (src, dst, inv_deg)
        object.__setattr__(g, "_nn_arrays", arrays)
    return arrays


def _linear(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    y = ad.matmul(x, params[prefix + ".W"])
    bias = prefix + ".b"
    return ad.add(y, params[bias]) if bias in params else y


def _mlp(x: Tensor, params: ParamStore, prefix: str, depth: int) -> Tensor:
    """ELU on hidden layers only."""
    for i in range(depth):
        x = _linear(x, params, f"{prefix}.{i}")
        if i < depth - 1:
            x = ad.elu(x)
    return x


class PolicyNet:
    def __init__(self, cfg: EncoderConfig = EncoderConfig(), seed: int = 0, params: Optional[ParamStore] = None):
        self.cfg = cfg
        self.seed = seed
        if params is None:
            params = ParamStore()
            self._build(params, seed)
        self.params = params

    def _build(self, ps: ParamStore, seed: int) -> None:
        c = self.cfg
        D, P = c.D, c.proj

        def lin(name, n_in, n_out, bias=True):
            ps.create(name + ".W", (n_in, n_out), seed)
            if bias:
                ps.create(name + ".b", (n_out,), seed)

        for k in range(c.K):
            lin(f"intra.{k}", 2 * (INPUT_DIM if k == 0 else D), D)
            for role in ("q", "g", "valq", "valg"):
                lin(f"match.{k}.{role}", D, P)
            lin(f"combine.{k}.q.0", P + D + FLAG_DIM, D)
            lin(f"combine.{k}.q.1", D, D)
            lin(f"combine.{k}.g.0", P + 2 * D + FLAG_DIM, D)
            lin(f"combine.{k}.g.1", D, D)
        ps.create("ln.gamma", (D,), seed)
        ps.create("ln.beta", (D,), seed)
        dims = (D,) + c.att_hidden + (1,)
        for i in range(len(dims) - 1):
            # softmax is shift invariant, so the scorer's output bias would be dead weight
            lin(f"att.{i}", dims[i], dims[i + 1], bias=i < len(dims) - 2)
        ps.create("bilinear.W", (c.F, D, D), seed)
        dims = (c.policy_input,) + c.policy_hidden + (1,)
        for i in range(len(dims) - 1):
            lin(f"policy.{i}", dims[i], dims[i + 1])

    # --- propagation ---------------------------------------------------------------

    def intra_propagate(self, g: LabeledGraph, h: Tensor, k: int) -> Tensor:
        """One GraphSAGE step: ELU(W . [h_u, mean of neighbor h] + b); isolated nodes see a zero mean."""
        if h.shape[0] != g.num_nodes:
            raise ad.ShapeError("embedding rows differ from node count")
        src, dst, inv_deg = _graph_arrays(g)
        nbr_sum = ad.scatter_add_rows(ad.gather_rows(h, dst), src, g.num_nodes)
        nbr_mean = ad.mul(nbr_sum, inv_deg)
        return ad.elu(_linear(ad.concat([h, nbr_mean]), self.params, f"intra.{k}"))

    def intra_embeddings(self, g: LabeledGraph) -> list[Tensor]:
        """Per-layer propagation outputs; layer k feeds only on layer k-1 propagation."""
        h = Tensor(initial_encoding(g, (), use_ldp=self.cfg.use_ldp))
        out = []
        for k in range(self.cfg.K):
            h = self.intra_propagate(g, h, k)
            out.append(h)
        return out

    # --- matching --------------------------------------------------------------------

    def inter_match_layer(
        self,
        k: int,
        hq_intra: Tensor,
        hG_intra: Tensor,
        ctx: "StateContext",
        rows: np.ndarray,
    ) -> tuple[Tensor, Tensor]:
        """Cross-graph attention for layer ``k`` (differentiable; search uses ``fast_encode``).

        Returns query embeddings for all query nodes and target embeddings for the
        target ids in ``rows``.
        """
        ps = self.params
        n_q = hq_intra.shape[0]
        n_r = len(rows)
        pair_u, pair_v = ctx.pair_u, ctx.pair_v

        involved, pair_vl = np.unique(np.concatenate([pair_v, rows]), return_inverse=True)
        pair_vl, rows_l = pair_vl[: len(pair_v)], pair_vl[len(pair_v) :]
        hv_intra = ad.gather_rows(hG_intra, involved)

        key_q = ad.elu(_linear(hq_intra, ps, f"match.{k}.q"))
        key_g = ad.elu(_linear(hv_intra, ps, f"match.{k}.g"))
        val_from_g = ad.elu(_linear(hv_intra, ps, f"match.{k}.valq"))
        val_from_q = ad.elu(_linear(hq_intra, ps, f"match.{k}.valg"))
        readout = ad.reduce_mean(hq_intra, axis=0)
        scores = ad.reduce_sum(ad.mul(ad.gather_rows(key_q, pair_u), ad.gather_rows(key_g, pair_vl)), axis=1)

        # target -> query messages
        w_q = ad.segment_softmax(scores, pair_u, n_q)
        msg_q = ad.scatter_add_rows(ad.mul(w_q, ad.gather_rows(val_from_g, pair_vl)), pair_u, n_q)

        # query -> target messages, only for the requested rows
        local = np.full(len(involved), -1, dtype=np.int64)
        local[rows_l] = np.arange(n_r)
        pair_r = local[pair_vl]
        keep = np.nonzero(pair_r >= 0)[0]
        pair_r = pair_r[keep]
        w_g = ad.segment_softmax(ad.gather_rows(scores, keep), pair_r, n_r)
        msg_g = ad.scatter_add_rows(
            ad.mul(w_g, ad.gather_rows(val_from_q, pair_u[keep])), pair_r, n_r
        )
        has_msg = np.zeros((n_r, 1))
        has_msg[pair_r] = 1.0
        if not self.cfg.query_readout:
            has_msg[:] = 0.0
        readout_part = ad.mul(ad.gather_rows(readout, np.zeros(n_r, dtype=np.int64)), has_msg)

        flags_q = ctx.query_flags
        flags_r = selected_flags(n_r, np.nonzero(np.isin(rows, ctx.matched_targets))[0])
        hq = _mlp(ad.concat([msg_q, hq_intra, Tensor(flags_q)]), ps, f"combine.{k}.q", 2)
        hr = _mlp(
            ad.concat([msg_g, readout_part, ad.gather_rows(hv_intra, rows_l), Tensor(flags_r)]),
            ps,
            f"combine.{k}.g",
            2,
        )
        return hq, hr

    def encode(
        self,
        q_intra: Sequence[Tensor],
        G_intra: Sequence[Tensor],
        ctx: "StateContext",
        rows: Sequence[int],
    ) -> tuple[Tensor, Tensor]:
        """Final (max-pooled, layer-normed) embeddings of all query nodes and of target ``rows``."""
        rows = np.asarray(rows, dtype=np.int64)
        outs_q, outs_g = [], []
        for k in range(self.cfg.K):
            hq, hr = self.inter_match_layer(k, q_intra[k], G_intra[k], ctx, rows)
            outs_q.append(hq)
            outs_g.append(hr)
        gamma, beta = self.params["ln.gamma"], self.params["ln.beta"]
        hq = ad.layer_norm(ad.stack_max(outs_q), gamma, beta)
        hr = ad.layer_norm(ad.stack_max(outs_g), gamma, beta)
        return hq, hr

    # --- decoder ------------------------------------------------------------------------

    def state_embedding(self, hq: Tensor) -> Tensor:
        n = hq.shape[0]
        depth = len(self.cfg.att_hidden) + 1
        logits = _mlp(hq, self.params, "att", depth)
        w = ad.segment_softmax(logits, np.zeros(n, dtype=np.int64), 1)
        return ad.reduce_sum(ad.mul(w, hq), axis=0)

    def attention_weights(self, hq: Tensor) -> np.ndarray:
        depth = len(self.cfg.att_hidden) + 1
        logits = _mlp(hq, self.params, "att", depth)
        return ad.segment_softmax(logits, np.zeros(hq.shape[0], dtype=np.int64), 1).data.reshape(-1)

    def pair_logits(self, hu: Tensor, hv: Tensor, hs: Tensor) -> Tensor:
        """One logit per row pair: MLP([hu W^[1:F] hv, h_s])."""
        inter = ad.bilinear(hu, self.params["bilinear.W"], hv)
        hs_rep = ad.gather_rows(hs, np.zeros(hu.shape[0], dtype=np.int64))
        depth = len(self.cfg.policy_hidden) + 1
        return _mlp(ad.concat([inter, hs_rep]), self.params, "policy", depth)

    # --- persistence ------------------------------------------------------------------------

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(ad.format_params(self.params, self.cfg.to_line()))

    @classmethod
    def load(cls, path) -> "PolicyNet":
        with open(path, encoding="ascii") as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        return ad.format_params(self.params, self.cfg.to_line())

    @classmethod
    def from_text(cls, text: str) -> "PolicyNet":
        header, arrays = ad.parse_params(text)
        cfg_lines = [h for h in header if h.startswith("CFG")]
        if len(cfg_lines) != 1:
            raise ValueError("checkpoint needs exactly one CFG line")
        cfg = EncoderConfig.from_line(cfg_lines[0])
        net = cls(cfg, seed=0)
        expected = net.params
        if list(arrays) != expected.names():
            missing = set(expected.names()) ^ set(arrays)
            raise ValueError(f"checkpoint parameters do not match config: {sorted(missing)[:5]}")
        for name, arr in arrays.items():
            if arr.shape != expected[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match config {expected[name].shape}")
            expected[name].data[...] = arr
        return net


# --- state context ----------------------------------------------------------------------------


class StateContext:
    """Current matches plus candidate hints for unmatched query nodes, as flat pair arrays."""

    def __init__(self, matched: Mapping[int, int], future: Mapping[int, Sequence[int]], num_query: int):
        self.matched = dict(matched)
        self.future = {u: list(a) for u, a in future.items()}
        pu, pv = [], []
        for u in range(num_query):
            if u in self.matched:
                pu.append(u)
                pv.append(self.matched[u])
            else:
                cand = self.future.get(u, ())
                pu.extend([u] * len(cand))
                pv.extend(cand)
        self.pair_u = np.array(pu, dtype=np.int64)
        self.pair_v = np.array(pv, dtype=np.int64)
        self.matched_targets = np.array(sorted(self.matched.values()), dtype=np.int64)
        self.query_flags = selected_flags(num_query, self.matched)

    def combined(self) -> dict[int, list[int]]:
        """M~_t: every query node to its matched target or its candidate list."""
        out: dict[int, list[int]] = {}
        for u, v in zip(self.pair_u.tolist(), self.pair_v.tolist()):
            out.setdefault(u, []).append(v)
        return out

    def reverse(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for u, v in zip(self.pair_u.tolist(), self.pair_v.tolist()):
            out.setdefault(v, []).append(u)
        return out

    def allows(self, u: int, v: int) -> bool:
        if u in self.matched:
            return self.matched[u] == v
        return v in self.future.get(u, ())


def build_state_context(problem: SearchProblem, mapping: Mapping[int, int]) -> StateContext:
    future = {
        u: local_candidates(problem, mapping, u) for u in range(problem.q.num_nodes) if u not in mapping
    }
    return StateContext(mapping, future, problem.q.num_nodes)


# --- caching ------------------------------------------------------------------------------------


def _np_elu(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0, ad.ELU_ALPHA * (np.exp(np.minimum(x, 0.0)) - 1.0), x)


def _np_linear(x: np.ndarray, params: ParamStore, prefix: str) -> np.ndarray:
    y = x @ params[prefix + ".W"].data
    bias = prefix + ".b"
    return y + params[bias].data if bias in params else y


def _np_mlp(x: np.ndarray, params: ParamStore, prefix: str, depth: int) -> np.ndarray:
    for i in range(depth):
        x = _np_linear(x, params, f"{prefix}.{i}")
        if i < depth - 1:
            x = _np_elu(x)
    return x


def _np_segment_softmax(z: np.ndarray, seg: np.ndarray, num_segments: int) -> np.ndarray:
    top = np.full(num_segments, -np.inf)
    np.maximum.at(top, seg, z)
    e = np.exp(z - top[seg])
    denom = np.zeros(num_segments)
    np.add.at(denom, seg, e)
    return e / denom[seg]


@dataclass(frozen=True)
class LayerProjections:
    """Attention keys/values and the query readout of one layer, over all nodes.

    They depend only on propagation outputs, so inference computes them once per search.
    """

    key_q: np.ndarray
    val_from_q: np.ndarray
    key_g: np.ndarray
    val_from_g: np.ndarray
    readout: np.ndarray
    hq_intra: np.ndarray
    hG_intra: np.ndarray

    @classmethod
    def compute(cls, net: "PolicyNet", k: int, hq_intra: Tensor, hG_intra: Tensor) -> "LayerProjections":
        ps = net.params
        hq, hg = hq_intra.data, hG_intra.data
        return cls(
            _np_elu(_np_linear(hq, ps, f"match.{k}.q")),
            _np_elu(_np_linear(hq, ps, f"match.{k}.valg")),
            _np_elu(_np_linear(hg, ps, f"match.{k}.g")),
            _np_elu(_np_linear(hg, ps, f"match.{k}.valq")),
            hq.mean(axis=0, keepdims=True),
            hq,
            hg,
        )


def fast_encode(
    net: PolicyNet, layers: Sequence[LayerProjections], ctx: StateContext, rows: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Inference-only twin of ``PolicyNet.encode`` on plain arrays (no tape, same arithmetic)."""
    ps = net.params
    rows = np.asarray(rows, dtype=np.int64)
    n_q, n_r = layers[0].hq_intra.shape[0], len(rows)
    pair_u, pair_v = ctx.pair_u, ctx.pair_v
    involved, inv = np.unique(np.concatenate([pair_v, rows]), return_inverse=True)
    pair_g, rows_l = involved[inv[: len(pair_v)]], involved[inv[len(pair_v) :]]
    local = np.full(len(involved), -1, dtype=np.int64)
    local[inv[len(pair_v) :]] = np.arange(n_r)
    pair_r = local[inv[: len(pair_v)]]
    keep = np.nonzero(pair_r >= 0)[0]
    pair_r, pair_uk = pair_r[keep], pair_u[keep]
    has_msg = np.zeros((n_r, 1))
    has_msg[pair_r] = 1.0
    if not net.cfg.query_readout:
        has_msg[:] = 0.0
    flags_q = ctx.query_flags
    flags_r = selected_flags(n_r, np.nonzero(np.isin(rows, ctx.matched_targets))[0])
    outs_q, outs_g = [], []
    for k, L in enumerate(layers):
        scores = (L.key_q[pair_u] * L.key_g[pair_g]).sum(axis=1, keepdims=True)
        w_q = _np_segment_softmax(scores.reshape(-1), pair_u, n_q).reshape(-1, 1)
        msg_q = np.zeros((n_q, L.val_from_g.shape[1]))
        np.add.at(msg_q, pair_u, w_q * L.val_from_g[pair_g])
        w_g = _np_segment_softmax(scores[keep].reshape(-1), pair_r, n_r).reshape(-1, 1)
        msg_g = np.zeros((n_r, L.val_from_q.shape[1]))
        np.add.at(msg_g, pair_r, w_g * L.val_from_q[pair_uk])
        readout_part = L.readout[np.zeros(n_r, dtype=np.int64)] * has_msg
        outs_q.append(_np_mlp(np.concatenate([msg_q, L.hq_intra, flags_q], axis=1), ps, f"combine.{k}.q", 2))
        outs_g.append(
            _np_mlp(
                np.concatenate([msg_g, readout_part, L.hG_intra[rows_l], flags_r], axis=1), ps, f"combine.{k}.g", 2
            )
        )
    gamma, beta = ps["ln.gamma"], ps["ln.beta"]
    hq = ad.layer_norm(Tensor(np.max(outs_q, axis=0)), gamma, beta).data
    hr = ad.layer_norm(Tensor(np.max(outs_g, axis=0)), gamma, beta).data
    if not (np.isfinite(hq).all() and np.isfinite(hr).all()):
        raise ad.NonFiniteError("non-finite embedding")
    return hq, hr


def fast_action_probabilities(net: PolicyNet, hq: np.ndarray, h_actions: np.ndarray, u_t: int) -> np.ndarray:
    """Inference-only twin of state_embedding + policy_logits + softmax."""
    ps = net.params
    att = _np_mlp(hq, ps, "att", len(net.cfg.att_hidden) + 1).reshape(-1)
    w = np.exp(att - att.max())
    w = (w / w.sum()).reshape(-1, 1)
    hs = (w * hq).sum(axis=0, keepdims=True)
    n = h_actions.shape[0]
    hu = hq[np.full(n, u_t, dtype=np.int64)]
    left = np.einsum("pd,fde->pfe", hu, ps["bilinear.W"].data)
    inter = np.einsum("pfe,pe->pf", left, h_actions)
    x = np.concatenate([inter, hs[np.zeros(n, dtype=np.int64)]], axis=1)
    logits = _np_mlp(x, ps, "policy", len(net.cfg.policy_hidden) + 1)
    return policy_distribution(logits)


class EmbeddingCache:
    """Propagation outputs for one (model, q, G) triple; one instance per search."""

    def __init__(self):
        self.token = None
        self.q_intra: Optional[list[Tensor]] = None
        self.G_intra: Optional[list[Tensor]] = None
        self.projections: Optional[list[LayerProjections]] = None
        self.hits = 0
        self.misses = 0

    def get(self, net: PolicyNet, q: LabeledGraph, G: LabeledGraph) -> tuple[list[Tensor], list[Tensor]]:
        token = (id(net.params), net.params.version, id(q), id(G), net.cfg.use_ldp)
        if token != self.token:
            self.misses += 1
            self.q_intra = net.intra_embeddings(q)
            self.G_intra = net.intra_embeddings(G)
            self.projections = [
                LayerProjections.compute(net, k, self.q_intra[k], self.G_intra[k]) for k in range(net.cfg.K)
            ]
            self.token = token
        else:
            self.hits += 1
        return self.q_intra, self.G_intra


def encode_state(
    net: PolicyNet,
    problem: SearchProblem,
    mapping: Mapping[int, int],
    cache: Optional[EmbeddingCache] = None,
    rows: Optional[Sequence[int]] = None,
) -> tuple[Tensor, Tensor, StateContext]:
    """Embeddings of every query node and of target ``rows`` (all of V_G by default)."""
    if cache is None:
        cache = EmbeddingCache()
    q_intra, G_intra = cache.get(net, problem.q, problem.G)
    ctx = build_state_context(problem, mapping)
    if rows is None:
        rows = range(problem.G.num_nodes)
    hq, hr = fast_encode(net, cache.projections, ctx, rows)
    return Tensor(hq), Tensor(hr), ctx


def policy_logits(
    net: PolicyNet, hq: Tensor, h_actions: Tensor, hs: Tensor, u_t: int
) -> Tensor:
    """Logits of (u_t, v) for each action row of ``h_actions``."""
    n = h_actions.shape[0]
    if n == 0:
        raise ValueError("action list is empty")
    hu = ad.gather_rows(hq, np.full(n, u_t, dtype=np.int64))
    return net.pair_logits(hu, h_actions, hs)


def policy_distribution(logits) -> np.ndarray:
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return ad.softmax(Tensor(x.reshape(-1))).data


def order_by_probability(actions: Sequence[int], probs: Sequence[float]) -> list[int]:
    """Descending probability; ties go to the smaller target id."""
    return [v for _, v in sorted(zip(probs, actions), key=lambda pv: (-pv[0], pv[1]))]


def action_probabilities(
    net: PolicyNet,
    problem: SearchProblem,
    mapping: Mapping[int, int],
    u_t: int,
    actions: Sequence[int],
    cache: Optional[EmbeddingCache] = None,
) -> np.ndarray:
    if not len(actions):
        raise ValueError("action list is empty")
    hq, ha, _ = encode_state(net, problem, mapping, cache, rows=actions)
    return fast_action_probabilities(net, hq.data, ha.data, u_t)


class NeuralPolicy:
    """Orders actions by the network's softmax probability. Parameters are only read."""

    name = "neural"

    def __init__(self, net: PolicyNet):
        self.net = net

    def start(self, problem: SearchProblem):
        cache = EmbeddingCache()

        def order(state: SearchState, actions):
            mapping = problem.mapping_of(state.assigned)
            probs = action_probabilities(self.net, problem, mapping, state.u, actions, cache)
            return order_by_probability(actions, probs)

        return order
