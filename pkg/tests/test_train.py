import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from subsearch import train as tr
from subsearch.autodiff import ParamStore, Tape, Tensor
from subsearch.graph import LabeledGraph, random_walk_sample
from subsearch.model import EncoderConfig, PolicyNet
from subsearch.search import (
    DegreePolicy,
    RandomPolicy,
    SearchBudget,
    SearchProblem,
    TruthPolicy,
    backtracking_search,
    brute_force_oracle,
)
from subsearch.train import (
    OptimizerState,
    ReplayBuffer,
    TrainConfig,
    Trainer,
    TrainingSample,
    adamw_step,
    clip_gradients,
    collect_training_signals,
    cross_entropy_general,
    global_grad_norm,
    lookahead_from_probs,
    max_margin_from_embeddings,
    sample_losses,
    sample_negatives,
    synthetic_target,
)

from conftest import triangle

SMALL = EncoderConfig(K=2, D=8, F=6, proj=5)
probs = arrays(np.float64, st.integers(1, 10), elements=st.floats(1e-6, 1 - 1e-6))


def collect(q, G, policy=None, **budget):
    problem = SearchProblem.prepare(q, G)
    out = backtracking_search(problem, policy or DegreePolicy(), SearchBudget(**budget), collect_tree=True)
    return problem, collect_training_signals(out, problem)


# --- signal collection --------------------------------------------------------------------------


def test_linear_solution_path():
    q = LabeledGraph.from_edges([0, 1, 2], [(0, 1), (1, 2)])
    G = LabeledGraph.from_edges([0, 1, 2, 1], [(0, 1), (1, 2), (0, 3)])
    _, samples = collect(q, G)
    by_depth = {len(s.assigned): sorted({k for k, _, _ in s.positives}) for s in samples}
    assert by_depth == {0: [0, 1, 2], 1: [0, 1], 2: [0]}


def test_two_branches_both_contribute():
    _, samples = collect(triangle(), triangle())
    root = next(s for s in samples if not s.assigned)
    assert {v for k, _, v in root.positives if k == 0} == {0, 1, 2}


def test_no_solution_no_samples():
    q = LabeledGraph.from_edges([0, 0, 0], [(0, 1), (1, 2), (0, 2)])
    G = LabeledGraph.from_edges([0, 0, 0], [(0, 1), (1, 2)])
    assert collect(q, G)[1] == []


@pytest.mark.filterwarnings("ignore:brute-force oracle")
def test_positives_replay_to_full_matches():
    G = synthetic_target(120, 2, 3, seed=6)
    for seed in range(5):
        sq = random_walk_sample(G, 5, 1.0, seed=seed)
        problem, samples = collect(sq.query, G, RandomPolicy(seed), solution_cap=10)
        _, matches = brute_force_oracle(sq.query, G)
        for s in samples:
            fixed = s.mapping
            for _, u, v in s.positives:
                assert any(
                    m[u] == v and all(m[a] == b for a, b in fixed.items()) for m in matches
                ), (s.assigned, u, v)


def test_future_pools_exclude_positives():
    _, samples = collect(triangle(), triangle())
    for s in samples:
        pos = {(k, u, v) for k, u, v in s.positives}
        for k, pairs in s.future_pools.items():
            assert not any((k, u, v) in pos for u, v in pairs)


# --- negatives --------------------------------------------------------------------------------


def fake_sample(actions, positives, pools=None):
    return TrainingSample(None, (), 0, tuple(actions), positives, [], pools or {})


def test_negatives_two_of_nine():
    s = fake_sample(range(10), [(0, 0, 3), (1, 2, 5)])
    neg = sample_negatives(s, seed=1)
    assert len(neg) == 2 and len(set(neg)) == 2
    assert all(u == 0 and v != 3 and 0 <= v < 10 for u, v in neg)


def test_negatives_fallback():
    s = fake_sample([3], [(0, 0, 3)], {1: [(1, 4), (1, 6)]})
    neg = sample_negatives(s, seed=0)
    assert len(neg) == 1 and neg[0] in {(1, 4), (1, 6)}


def test_negatives_none_available():
    assert sample_negatives(fake_sample([3], [(0, 0, 3)]), seed=0) == []


def test_negatives_never_k0_positive_1000_seeds():
    s = fake_sample(range(6), [(0, 0, 1), (0, 0, 4), (1, 1, 2), (2, 3, 0)])
    for seed in range(1000):
        neg = sample_negatives(s, seed)
        assert len(neg) == 4
        assert not any(v in (1, 4) for _, v in neg)


@given(st.integers(0, 10**6))
def test_negatives_property(seed):
    rng = random.Random(seed)
    actions = rng.sample(range(30), rng.randint(1, 12))
    pos = [(0, 0, v) for v in rng.sample(actions, rng.randint(1, len(actions)))]
    pos += [(k, 1, rng.randrange(30)) for k in range(1, rng.randint(1, 4))]
    s = fake_sample(actions, pos, {1: [(1, 99)]})
    neg = sample_negatives(s, seed)
    k0 = {v for k, _, v in pos if k == 0}
    assert len(neg) == len(pos)
    assert not any(u == 0 and v in k0 for u, v in neg if v != 99)


# --- losses -------------------------------------------------------------------------------------


def test_single_half_probability_is_ln2():
    assert abs(lookahead_from_probs(Tensor(np.array([0.5])), None).item() - math.log(2)) < 1e-9


def test_additive_over_states():
    one = lookahead_from_probs(Tensor(np.array([0.5])), None).item()
    two = lookahead_from_probs(Tensor(np.array([0.5, 0.5])), None).item()
    assert abs(two - 2 * one) < 1e-15 and abs(two - 2 * math.log(2)) < 1e-9


def test_perfect_prediction_limit():
    pos = Tensor(np.full(5, 1 - 1e-7))
    neg = Tensor(np.full(5, 1e-7))
    assert lookahead_from_probs(pos, neg).item() / 10 < 1e-5


def _reward_weighted_ce(p_pos, p_neg, r_pos=1.0, r_neg=0.0):
    """Direct numpy statement of the reward-weighted cross entropy."""
    out = 0.0
    for p, r in [(x, r_pos) for x in p_pos] + [(x, r_neg) for x in p_neg]:
        out -= r * math.log(p) + (1 - r) * math.log(1 - p)
    return out


@given(probs, probs)
def test_simplified_equals_general_form(p, n):
    simple = lookahead_from_probs(Tensor(p), Tensor(n)).item()
    general = cross_entropy_general(Tensor(p), Tensor(n)).item()
    assert abs(simple - general) < 1e-12
    assert abs(simple - _reward_weighted_ce(p, n)) < 1e-9 * max(1.0, abs(simple))


def test_max_margin_examples():
    z = Tensor(np.zeros((1, 3)))
    e1 = Tensor(np.array([[1.0, 0.0, 0.0]]))
    assert max_margin_from_embeddings(e1, e1, None, None, 1.0).item() == 0.0
    assert max_margin_from_embeddings(e1, z, None, None, 1.0).item() == 1.0
    big = Tensor(np.array([[2.0, 0.0, 0.0]]))
    assert max_margin_from_embeddings(e1, e1, big, z, 1.0).item() == 0.0
    assert max_margin_from_embeddings(e1, e1, e1, e1, 1.0).item() == 1.0


@pytest.fixture(scope="module")
def real_samples():
    G = synthetic_target(100, 2, 3, seed=3)
    sq = random_walk_sample(G, 6, 1.0, seed=1)
    _, samples = collect(sq.query, G, RandomPolicy(0), step_limit=400, solution_cap=5)
    for i, s in enumerate(samples):
        s.negatives = sample_negatives(s, i)
    assert samples
    return samples


def test_total_is_sum(real_samples):
    net = PolicyNet(SMALL, seed=2)
    for s in real_samples[:10]:
        sl = sample_losses(net, s)
        assert abs(sl.total.item() - (sl.la.item() + sl.mm.item())) <= 1e-12 * max(1.0, sl.total.item())
        assert sl.la.item() >= 0 and sl.mm.item() >= 0


def test_no_positives_gives_zero_total():
    s = TrainingSample(SearchProblem.prepare(triangle(), triangle()), (), 0, (0, 1, 2), [], [], {})
    assert sample_losses(PolicyNet(SMALL, seed=0), s).total.item() == 0.0


def test_gradients_reach_both_heads(real_samples):
    net = PolicyNet(SMALL, seed=1)
    s = max(real_samples, key=lambda x: len(x.negatives))
    net.params.zero_grad()
    with Tape() as tape:
        loss = sample_losses(net, s).total
    tape.backward(loss, net.params)
    assert np.any(net.params.grads["policy.0.W"] != 0)
    assert np.any(net.params.grads["intra.0.W"] != 0)
    assert np.any(net.params.grads["ln.gamma"] != 0)


# --- optimizer ------------------------------------------------------------------------------------


def _store(seed=0):
    ps = ParamStore()
    ps.create("a.W", (3, 4), seed)
    ps.create("b.W", (5,), seed + 1)
    return ps


def test_zero_grad_no_decay_unchanged():
    ps = _store()
    before = ps.snapshot()
    ps.zero_grad()
    adamw_step(ps, OptimizerState(weight_decay=0.0))
    assert all(np.array_equal(before[k], p.data) for k, p in ps.items())


def test_zero_grad_decay_exact():
    ps = _store()
    before = ps.snapshot()
    ps.zero_grad()
    opt = OptimizerState()
    adamw_step(ps, opt)
    factor = 1.0 - opt.lr * opt.weight_decay
    assert all(np.array_equal(before[k] * factor, p.data) for k, p in ps.items())


def test_clip_to_point_one():
    ps = _store()
    ps.zero_grad()
    ps.grads["a.W"][0, 0] = 0.6
    ps.grads["b.W"][1] = 0.8
    assert clip_gradients(ps, 0.1) == pytest.approx(1.0)
    assert abs(global_grad_norm(ps) - 0.1) < 1e-12


@given(arrays(np.float64, (3, 4), elements=st.floats(-100, 100)))
def test_clip_bound(g):
    ps = _store()
    ps.zero_grad()
    ps.grads["a.W"][...] = g
    clip_gradients(ps, 0.1)
    assert global_grad_norm(ps) <= 0.1 + 1e-12


def test_first_step_matches_reference():
    ps = _store()
    before = ps.snapshot()
    rng = np.random.default_rng(0)
    for g in ps.grads.values():
        g[...] = rng.normal(size=g.shape) * 1e-3  # below the clip norm
    grads = {k: g.copy() for k, g in ps.grads.items()}
    opt = OptimizerState()
    adamw_step(ps, opt)
    for k, p in ps.items():
        g = grads[k]
        m_hat = g  # (1-b1) g / (1-b1)
        v_hat = g * g
        want = before[k] * (1 - opt.lr * opt.weight_decay) - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        assert np.allclose(p.data, want, rtol=0, atol=1e-15)
    assert opt.step == 1


def test_non_finite_gradient_skipped():
    ps = _store()
    before = ps.snapshot()
    ps.zero_grad()
    ps.grads["a.W"][0, 0] = np.nan
    opt = OptimizerState()
    assert not adamw_step(ps, opt)
    assert opt.skipped == 1 and opt.step == 0
    assert all(np.array_equal(before[k], p.data) for k, p in ps.items())


# --- replay buffer ---------------------------------------------------------------------------


def test_buffer_fifo_at_capacity():
    buf = ReplayBuffer(128)
    buf.extend(range(200))
    assert len(buf) == 128 and list(buf) == list(range(72, 200))


def test_buffer_sample_without_replacement():
    buf = ReplayBuffer(128)
    buf.extend(range(50))
    batch = buf.sample(32, random.Random(0))
    assert len(batch) == 32 == len(set(batch))
    assert len(buf.sample(32, random.Random(0))) == 32
    small = ReplayBuffer(4)
    small.extend("ab")
    assert sorted(small.sample(32, random.Random(1))) == ["a", "b"]


# --- training loop ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_target():
    return synthetic_target(200, 3, 3, seed=11)


def test_empty_iteration_reports_no_steps(small_target):
    cfg = TrainConfig(train_step_limit=1, curriculum=(8,), val_every=0)
    rep = Trainer(PolicyNet(SMALL, seed=0), small_target, cfg).train_iteration()
    assert rep.samples == 0 and rep.optimizer_steps == 0 and rep.buffer_size == 0
    assert math.isnan(rep.loss_total)


def test_losses_decrease_on_probe_samples(small_target):
    net = PolicyNet(EncoderConfig(K=2, D=8), seed=0)
    cfg = TrainConfig(curriculum=(8,), val_every=0, train_step_limit=2000, max_samples_per_search=32, seed=3)
    trainer = Trainer(net, small_target, cfg)
    probes = []
    for seed in range(3):
        sq = random_walk_sample(small_target, 8, 1.0, seed=500 + seed)
        _, out = trainer.search_and_collect(sq)
        probes.extend(out[:8])
    assert probes

    def probe_loss():
        return float(np.mean([sample_losses(net, s).total.item() for s in probes]))

    before = probe_loss()
    trainer.fit(20)
    after = probe_loss()
    assert after < before, (before, after)


def test_validation_reward_all_solved(small_target, monkeypatch):
    G = synthetic_target(300, 3, 4, seed=5)
    vset = tr.make_validation_set(G, seed=2)
    assert sorted(len(sq.query.labels) for sq in vset) == sorted([8, 16, 32, 64, 128] * 3)
    truth = {id(sq.query): sq.truth_mapping for sq in vset}

    class Oracle:
        name = "truth"

        def __init__(self, net):
            pass

        def start(self, problem):
            return TruthPolicy(truth[id(problem.q)]).start(problem)

    monkeypatch.setattr(tr, "NeuralPolicy", Oracle)
    reward = tr.validation_reward(PolicyNet(SMALL), G, vset, step_limit=2000)
    assert reward == pytest.approx(49.6, abs=1e-12)


def test_validation_tie_reverts_bit_exact(small_target):
    net = PolicyNet(SMALL, seed=0)
    trainer = Trainer(net, small_target, TrainConfig(val_every=0))
    rewards = iter([5.0, 5.0, 6.0])
    trainer.evaluate_validation = lambda: next(rewards)
    best = trainer.validate_and_checkpoint()
    saved = {k: v.copy() for k, v in best.params.items()}
    for _, p in net.params.items():
        p.data += 0.25
    trainer.iteration = 1
    assert trainer.validate_and_checkpoint().iteration == 0  # tie: reverted
    assert all(np.array_equal(saved[k], p.data) for k, p in net.params.items())
    for _, p in net.params.items():
        p.data *= 1.5
    trainer.iteration = 2
    best = trainer.validate_and_checkpoint()
    assert best.iteration == 2 and best.val_reward == 6.0
    assert all(np.array_equal(best.params[k], p.data) for k, p in net.params.items())


def test_fit_writes_log(small_target, tmp_path):
    cfg = TrainConfig(curriculum=(8,), val_every=0, train_step_limit=500, max_samples_per_search=8)
    Trainer(PolicyNet(SMALL, seed=0), small_target, cfg).fit(2, log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == ",".join(tr.LOG_HEADER) and len(lines) == 3


def test_gradient_check_passes():
    assert tr.gradient_check(seed=0, num_coords=60).max_rel_error < 1e-4
