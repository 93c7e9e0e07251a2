import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfada.diffmath import Graph, evaluate, finite_difference_check, gradient
from sfada.losses import (
    ChainContrastiveParams,
    LossWeights,
    ce_graph,
    chain_contrastive,
    chain_graph,
    cross_entropy,
    inter_consistency,
    inter_graph,
    intra_consistency,
    intra_graph,
    intra_single_graph,
    mixup,
    proto_graph,
    prototype_contrastive,
    sinkhorn,
    total_graph,
    total_loss,
    transport_soft_labels,
)


def test_cross_entropy_examples():
    assert cross_entropy([1, 0, 0, 0, 0], [1, 0, 0, 0, 0]) == 0.0
    assert cross_entropy(np.full(5, 0.2), np.eye(5)[3]) == pytest.approx(math.log(5), abs=1e-12)
    assert cross_entropy([0.7, 0.3], [1, 0]) == pytest.approx(0.356675, abs=1e-6)


def test_cross_entropy_log_guard():
    with pytest.raises(ValueError):
        cross_entropy([0.0, 1.0], [1, 0])
    assert cross_entropy([0.0, 1.0], [0, 1]) == 0.0


def test_chain_symmetric_cases():
    params = ChainContrastiveParams(tau=1.0, gamma=0.0, beta0=0.0)
    a = np.array([1.0, 0.0])
    negs = np.array([[1.0, 0.0]] * 4)
    assert chain_contrastive(a, a, negs, [1, 2, 3, 4], params) == pytest.approx(math.log(5), abs=1e-12)
    assert chain_contrastive(a, [0.0, 1.0], [[0.0, 2.0]], [1], params) == pytest.approx(math.log(2), abs=1e-12)


def test_chain_hand_formula():
    params = ChainContrastiveParams(tau=0.5, gamma=0.1, beta0=0.2, schedule="gap")
    anchor = np.array([1.0, 0.0])
    pos = np.array([0.9, math.sqrt(1 - 0.81)])
    neg = np.array([[0.1, math.sqrt(1 - 0.01)]])
    num = math.exp((0.9 - 0.1) / 0.5)
    den = num + math.exp((0.1 - 0.2) / 0.5)
    expected = -math.log(num / den)
    assert chain_contrastive(anchor, pos, neg, [1], params) == pytest.approx(expected, abs=1e-12)


def test_margin_schedules():
    gaps = np.array([1, 2, 3, 4])
    prox = ChainContrastiveParams(beta0=0.1).negative_margins(gaps)
    np.testing.assert_allclose(prox, [0.3, 0.2, 0.1, 0.0])
    np.testing.assert_allclose(ChainContrastiveParams(beta0=0.1, schedule="gap").negative_margins(gaps),
                               [0.1, 0.2, 0.3, 0.4])
    assert np.all(prox >= 0)
    with pytest.raises(ValueError):
        ChainContrastiveParams(max_gap=2).negative_margins([3])
    with pytest.raises(ValueError):
        ChainContrastiveParams(schedule="quadratic")


def test_proximity_schedule_repels_far_grades_more():
    # same similarities: the far-grade negative contributes a larger logit, hence more gradient push
    params = ChainContrastiveParams(tau=0.5, gamma=0.0, beta0=0.2)
    a = np.array([1.0, 0.0])
    near = chain_contrastive(a, a, [[0.0, 1.0]], [1], params)
    far = chain_contrastive(a, a, [[0.0, 1.0]], [4], params)
    assert far > near


def test_chain_rejects_bad_input():
    params = ChainContrastiveParams()
    with pytest.raises(ValueError):
        chain_contrastive([1.0, 0.0], [1.0, 0.0], np.zeros((0, 2)), [], params)
    with pytest.raises(ValueError):
        chain_contrastive([0.0, 0.0], [1.0, 0.0], [[0.0, 1.0]], [1], params)
    with pytest.raises(ValueError):
        ChainContrastiveParams(tau=0.0)


def _infonce(a, pos, negs, tau):
    a = a / np.linalg.norm(a)
    sims = [a @ (v / np.linalg.norm(v)) / tau for v in [pos, *negs]]
    return -sims[0] + math.log(sum(math.exp(s) for s in sims))


@pytest.mark.parametrize("seed", range(20))
def test_chain_reduces_to_infonce(seed):
    rng = np.random.default_rng(seed)
    a, pos = rng.normal(size=6), rng.normal(size=6)
    negs = rng.normal(size=(4, 6))
    params = ChainContrastiveParams(tau=0.3, gamma=0.0, beta0=0.0)
    got = chain_contrastive(a, pos, negs, [1, 2, 3, 1], params)
    assert got == pytest.approx(_infonce(a, pos, negs, 0.3), abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_chain_graph_matches_per_anchor_formula(seed):
    rng = np.random.default_rng(seed)
    labels = np.array([0, 1, 2, 0, 1, 2, 4, 0])
    H = rng.normal(size=(len(labels), 5))
    params = ChainContrastiveParams(tau=0.2, gamma=0.05, beta0=0.1)
    g = Graph()
    loss = chain_graph(g, g.input("h"), labels, params)
    got = evaluate(g, {"h": H})[loss.id]
    expected = []
    for i, y in enumerate(labels):
        mates = [j for j in list(range(i + 1, len(labels))) + list(range(i)) if labels[j] == y]
        if not mates:
            continue
        negs = [j for j in range(len(labels)) if labels[j] != y]
        expected.append(chain_contrastive(H[i], H[mates[0]], H[negs], np.abs(labels[negs] - y), params))
    assert got == pytest.approx(np.mean(expected), abs=1e-12)


def test_prototype_contrastive_examples():
    K = 5
    P = np.eye(K)
    got = prototype_contrastive(P[2], P, 2, 1.0)
    assert got == pytest.approx(-math.log(math.e / (math.e + K - 1)), abs=1e-12)
    same = np.tile([1.0, 2.0, 3.0, 0.5, 0.0], (K, 1))
    assert prototype_contrastive([0.3, -1, 2, 0, 1], same, 1, 0.7) == pytest.approx(math.log(K), abs=1e-12)
    with pytest.raises(ValueError):
        prototype_contrastive([1.0], [[1.0]], 0, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_prototype_contrastive_formula_oracle(seed):
    rng = np.random.default_rng(seed)
    h, P = rng.normal(size=8), rng.normal(size=(5, 8))
    y = int(rng.integers(5))
    tau = 0.25
    sims = [(h @ p) / (np.linalg.norm(h) * np.linalg.norm(p)) / tau for p in P]
    expected = -math.log(math.exp(sims[y]) / sum(math.exp(s) for s in sims))
    assert prototype_contrastive(h, P, y, tau) == pytest.approx(expected, abs=1e-10)
    g = Graph()
    loss = proto_graph(g, g.input("h"), P, [y], tau)
    assert evaluate(g, {"h": h[None, :]})[loss.id] == pytest.approx(expected, abs=1e-10)


def test_sinkhorn_constant_cost_is_product():
    rng = np.random.default_rng(1)
    a = rng.random(6) + 0.1
    b = rng.random(4) + 0.1
    a, b = a / a.sum(), b / b.sum()
    tp = sinkhorn(np.full((6, 4), 0.7), a, b, eps=0.05)
    np.testing.assert_allclose(tp.plan, np.outer(a, b), atol=1e-10)


def _lp_2x2(cost, a, b):
    # vertices of the 2x2 transport polytope: the plan is fixed by its (0, 0) entry
    lo, hi = max(0.0, a[0] - b[1]), min(a[0], b[0])
    best = None
    for t in (lo, hi):
        plan = np.array([[t, a[0] - t], [b[0] - t, a[1] - b[0] + t]])
        c = (plan * cost).sum()
        if best is None or c < best[0]:
            best = (c, plan)
    return best[1]


def test_sinkhorn_2x2_matches_enumerated_lp():
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    a = b = np.array([0.5, 0.5])
    tp = sinkhorn(cost, a, b, eps=0.01, max_iters=500)
    np.testing.assert_allclose(tp.plan, _lp_2x2(cost, a, b), atol=1e-3)
    np.testing.assert_allclose(tp.plan, np.eye(2) / 2, atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_sinkhorn_marginals(n, K, seed):
    rng = np.random.default_rng(seed)
    a = rng.random(n) + 0.05
    b = rng.random(K) + 0.05
    tp = sinkhorn(rng.random((n, K)), a / a.sum(), b / b.sum(), eps=0.05, max_iters=500)
    # plain iterations may stop short on a few instances; that must be flagged, and the plan stays feasible
    assert tp.converged == (tp.violation < 1e-6)
    assert np.all(tp.plan >= 0)
    assert np.abs(tp.plan.sum(1) - tp.a).max() < 1e-6
    assert np.abs(tp.plan.sum(0) - tp.b).max() < 1e-6


def test_sinkhorn_flags_non_convergence():
    rng = np.random.default_rng(0)
    tp = sinkhorn(rng.random((8, 5)) * 5, np.full(8, 1 / 8), np.full(5, 1 / 5), eps=0.01, max_iters=1)
    assert not tp.converged
    assert tp.iterations == 1


def test_inter_consistency_prototype_aligned_batch():
    rng = np.random.default_rng(7)
    P = np.linalg.qr(rng.normal(size=(16, 5)))[0].T
    strong = 20.0 * np.eye(5)
    assert inter_consistency(P, P, strong) < 0.05


def test_inter_consistency_zero_for_equal_targets():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(5, 8))
    H = rng.normal(size=(6, 8))
    soft = transport_soft_labels(H, P)
    assert inter_consistency(H, P, np.log(soft)) == pytest.approx(0.0, abs=1e-12)


def test_inter_consistency_permutation_invariant():
    rng = np.random.default_rng(3)
    P = rng.normal(size=(5, 8))
    H = rng.normal(size=(7, 8))
    Z = rng.normal(size=(7, 5))
    perm = rng.permutation(7)
    assert inter_consistency(H[perm], P, Z[perm]) == pytest.approx(inter_consistency(H, P, Z), abs=1e-9)


def test_intra_consistency_examples():
    e = np.eye(5)
    assert intra_consistency(e[1], e[1]) == 0.0
    assert intra_consistency(e[1], e[3]) == 1.0
    assert intra_consistency(np.full(5, 0.2), np.full(5, 0.2)) == pytest.approx(0.8, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=2, max_size=6))
def test_intra_consistency_closed_form(w):
    p = np.array(w) / np.sum(w)
    assert intra_consistency(p, p) == pytest.approx(1 - p @ p, abs=1e-12)
    best = np.eye(len(p))[np.argmax(p)]
    rng = np.random.default_rng(len(w))
    q = rng.dirichlet(np.ones(len(p)))
    assert intra_consistency(p, best) <= intra_consistency(p, q) + 1e-12


def test_mixup_examples():
    x, y, lam = mixup([4, 0], [1, 0], [0, 4], [0, 1], 1.0, 1.0, lam=0.25)
    np.testing.assert_allclose(x, [1, 3])
    np.testing.assert_allclose(y, [0.25, 0.75])
    x, y, _ = mixup([4, 0], [1, 0], [0, 4], [0, 1], 1.0, 1.0, lam=1.0)
    np.testing.assert_array_equal(x, [4, 0])
    np.testing.assert_array_equal(y, [1, 0])
    rng = np.random.default_rng(0)
    _, y, lam = mixup([1, 2], [0, 1, 0], [3, 4], [0, 1, 0], 0.5, 0.5, rng)
    assert 0 <= lam <= 1
    np.testing.assert_allclose(y, [0, 1, 0])


def test_total_loss():
    terms = dict(ce=1.0, alg=2.0, inter=3.0, intra=4.0, mix=5.0)
    assert total_loss(terms, LossWeights(0, 0, 0, 0)) == 1.0
    assert total_loss((1, 2, 3, 4, 5), LossWeights(1, 1, 1, 1)) == 15.0
    with pytest.raises(ValueError):
        LossWeights(alg=-1.0)


def _loss_instance(name, rng):
    """Graph, scalar node and bindings for one loss on a random instance."""
    K, d, n = 5, 6, 7
    g = Graph()
    if name == "ce":
        z = g.input("z")
        y = rng.dirichlet(np.ones(K), size=n)
        return g, ce_graph(g, z, y), {"z": rng.normal(size=(n, K))}
    if name == "chain":
        h = g.input("h")
        labels = rng.integers(0, K, size=10)
        labels[:2] = [0, 0]
        labels[2] = 1
        params = ChainContrastiveParams(tau=0.5, gamma=0.1, beta0=0.1)
        return g, chain_graph(g, h, labels, params), {"h": rng.normal(size=(10, d))}
    if name == "proto":
        h = g.input("h")
        P = rng.normal(size=(K, d))
        return g, proto_graph(g, h, P, rng.integers(0, K, size=n), 0.5), {"h": rng.normal(size=(n, d))}
    if name == "inter":
        z = g.input("z")
        soft = transport_soft_labels(rng.normal(size=(n, d)), rng.normal(size=(K, d)))
        return g, inter_graph(g, soft, z), {"z": rng.normal(size=(n, K))}
    if name == "intra":
        zw, zs = g.input("zw"), g.input("zs")
        return g, intra_graph(g, zw, zs), {"zw": rng.normal(size=(n, K)), "zs": rng.normal(size=(n, K))}
    if name == "mix":
        z = g.input("z")
        xi, xj = np.eye(K)[rng.integers(0, K, n)], np.eye(K)[rng.integers(0, K, n)]
        _, ymix, _ = mixup(xi, xi, xj, xj, 1.0, 1.0, rng)
        return g, ce_graph(g, z, ymix), {"z": rng.normal(size=(n, K))}
    if name == "total":
        h = g.input("h")
        W = g.input("W")
        hs = g.input("hs")
        logit = g.matmul(h, W)
        logit_s = g.matmul(hs, W)
        y = np.eye(K)[rng.integers(0, K, n)]
        P = rng.normal(size=(K, d))
        soft = transport_soft_labels(rng.normal(size=(n, d)), P)
        terms = dict(
            ce=ce_graph(g, logit, y),
            alg=proto_graph(g, h, P, y.argmax(1), 0.5),
            inter=inter_graph(g, soft, logit_s),
            intra=intra_graph(g, logit, logit_s),
            mix=ce_graph(g, logit_s, y),
        )
        out = total_graph(g, terms, LossWeights(0.5, 1.5, 2.0, 0.7))
        bind = {"h": rng.normal(size=(n, d)), "W": rng.normal(size=(d, K)), "hs": rng.normal(size=(n, d))}
        return g, out, bind
    raise KeyError(name)


@pytest.mark.parametrize("name", ["ce", "chain", "proto", "inter", "intra", "mix", "total"])
def test_loss_gradients_pass_fd(name):
    rng = np.random.default_rng(100)
    for _ in range(5):
        g, out, bind = _loss_instance(name, rng)
        assert finite_difference_check(g, bind, out) < 1e-4


def test_total_gradient_is_weighted_sum_of_term_gradients():
    rng = np.random.default_rng(4)
    n, K = 6, 5
    weights = LossWeights(0.3, 0.0, 2.0, 1.1)
    zw, zs = rng.normal(size=(n, K)), rng.normal(size=(n, K))
    y = np.eye(K)[rng.integers(0, K, n)]

    def build(which):
        g = Graph()
        a, b = g.input("zw"), g.input("zs")
        terms = dict(ce=ce_graph(g, a, y), intra=intra_graph(g, a, b), mix=ce_graph(g, b, y))
        if which == "total":
            return g, total_graph(g, terms, weights)
        return g, terms[which]

    bind = {"zw": zw, "zs": zs}
    gt, out = build("total")
    total = gradient(gt, bind, out)
    parts = {}
    for key in ("ce", "intra", "mix"):
        gk, ok = build(key)
        parts[key] = gradient(gk, bind, ok)
    for key in ("zw", "zs"):
        expected = parts["ce"][key] + weights.intra * parts["intra"][key] + weights.mix * parts["mix"][key]
        np.testing.assert_allclose(total[key], expected, atol=1e-12)


def test_intra_single_graph_matches_closed_form():
    rng = np.random.default_rng(5)
    pw, ps = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    g = Graph()
    out = intra_single_graph(g, g.input("a"), g.input("b"))
    assert evaluate(g, {"a": pw, "b": ps})[out.id] == pytest.approx(1 - pw @ ps, abs=1e-12)
    assert finite_difference_check(g, {"a": pw, "b": ps}, out) < 1e-4


def test_sinkhorn_rounding_is_small_and_feasible():
    # slow instance: plain iterations stop short of the tolerance, rounding restores the marginals
    rng = np.random.default_rng(3)
    a, b = rng.random(7) + 0.05, rng.random(13) + 0.05
    a, b = a / a.sum(), b / b.sum()
    C = rng.random((7, 13))
    tp = sinkhorn(C, a, b, eps=0.01, max_iters=50, tol=1e-12)
    assert not tp.converged and tp.violation > 1e-9
    np.testing.assert_allclose(tp.plan.sum(1), a, atol=1e-12)
    np.testing.assert_allclose(tp.plan.sum(0), b, atol=1e-12)
    assert np.all(tp.plan >= 0)
    long = sinkhorn(C, a, b, eps=0.01, max_iters=20000, tol=1e-12)
    assert np.abs(tp.plan - long.plan).sum() <= 4 * tp.violation * len(a) * len(b)


def test_transport_soft_labels_follow_class_marginal():
    rng = np.random.default_rng(4)
    H, P = rng.normal(size=(40, 6)), rng.normal(size=(3, 6))
    skewed = transport_soft_labels(H, P, class_marginal=[0.8, 0.1, 0.1]).mean(0)
    even = transport_soft_labels(H, P).mean(0)
    assert skewed[0] > even[0]
    np.testing.assert_allclose(transport_soft_labels(H, P, class_marginal=np.full(3, 1 / 3)),
                               transport_soft_labels(H, P), atol=1e-12)
