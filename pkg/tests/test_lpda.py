import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfada import nets
from sfada.active import DatasetPartition
from sfada.lpda import (
    ActiveConfig,
    FeatureBank,
    LPDAConfig,
    ModelView,
    PrototypeBank,
    PseudoState,
    adapt,
    augment,
    blend,
    candidates,
    reconcile,
    spmis_step,
    update_prototypes,
)
from sfada.losses import LossWeights
from sfada.source import SourceTrainConfig, pretrain_source, train_generator
from sfada.synthdata import DomainSpec, make_source, make_target

# prototype bank


def test_prototype_update_examples():
    bank = PrototypeBank(np.array([[1.0], [2.0]]), beta=1.0)
    assert np.array_equal(update_prototypes(bank, {0: [5.0], 1: [7.0]}).prototypes, bank.prototypes)
    bank = PrototypeBank(np.array([[1.0], [2.0]]), beta=0.0)
    assert np.array_equal(update_prototypes(bank, {0: [5.0], 1: [7.0]}).prototypes, [[5.0], [7.0]])
    bank = PrototypeBank(np.array([[1.0]]), beta=0.99)
    assert update_prototypes(bank, {0: [0.5]}).prototypes[0, 0] == pytest.approx(0.995, abs=1e-15)


def test_prototype_missing_class_left_unchanged(caplog):
    bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]), beta=0.5)
    with caplog.at_level("INFO"):
        out = update_prototypes(bank, {0: np.array([3.0, 3.0])})
    assert np.array_equal(out.prototypes[1], [0.0, 1.0])
    assert np.array_equal(out.prototypes[0], [2.0, 1.5])
    assert "prototype 1" in caplog.text
    assert np.array_equal(bank.prototypes[0], [1.0, 0.0])  # input bank untouched


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_prototype_drift_bound(seed, beta):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(5, 4))
    o = {c: rng.normal(size=4) * 3 for c in range(5)}
    new = update_prototypes(PrototypeBank(h, beta), o).prototypes
    for c in range(5):
        assert np.linalg.norm(new[c] - h[c]) <= (1 - beta) * np.linalg.norm(o[c] - h[c]) + 1e-12


# feature bank and candidates


def test_feature_bank_refresh_ema():
    bank = FeatureBank(np.zeros((3, 2)), rate=0.9)
    bank.refresh([0, 2], np.array([[1.0, 1.0], [2.0, 0.0]]))
    assert np.array_equal(bank.values[0], [1.0, 1.0])  # first refresh copies
    bank.refresh([0], np.array([[0.0, 0.0]]))
    assert np.allclose(bank.values[0], [0.9, 0.9], atol=1e-15)
    assert bank.filled.tolist() == [True, False, True]
    assert bank.norms[0] == pytest.approx(np.hypot(0.9, 0.9))


def _filled_bank(values):
    bank = FeatureBank(np.zeros_like(values))
    bank.refresh(np.arange(len(values)), values)
    return bank


def test_candidates_whole_pool_sorted():
    rng = np.random.default_rng(0)
    V = rng.normal(size=(6, 3))
    q = rng.normal(size=3)
    out = candidates(q, _filled_bank(V), 6)
    sims = V @ q / (np.linalg.norm(V, axis=1) * np.linalg.norm(q))
    assert out == list(np.argsort(sims, kind="stable"))


def test_candidates_antipodal_first():
    rng = np.random.default_rng(1)
    q = rng.normal(size=4)
    V = rng.normal(size=(5, 4))
    V[3] = -q
    assert candidates(q, _filled_bank(V), 1) == [3]


@pytest.mark.parametrize("seed", range(10))
def test_candidates_match_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(4, 3))
    q = rng.normal(size=3)
    excluded = {int(rng.integers(4))}
    out = candidates(q, _filled_bank(V), 2, excluded)
    pool = [i for i in range(4) if i not in excluded]
    cos = lambda i: float(V[i] @ q / (np.linalg.norm(V[i]) * np.linalg.norm(q)))
    best = min(itertools.permutations(pool, 2), key=lambda p: (cos(p[0]), p[0], cos(p[1]), p[1]))
    assert out == list(best)


def test_candidates_ties_and_exclusions():
    V = np.array([[1.0, 0.0], [-1.0, 0.0], [-2.0, 0.0], [0.0, 1.0]])
    bank = _filled_bank(V)
    assert candidates([1.0, 0.0], bank, 2) == [1, 2]
    mask = np.array([False, True, False, False])
    assert candidates([1.0, 0.0], bank, 2, mask) == [2, 3]
    assert candidates([1.0, 0.0], bank, 5, [0, 1, 2, 3]) == []
    with pytest.raises(ValueError):
        candidates([1.0, 0.0], bank, 0)


# augmentation


def test_augment_examples():
    x = np.array([1.0, -2.0, 3.0])
    rng = np.random.default_rng(0)
    assert np.array_equal(augment(x, "weak", rng, 0.0), x)
    assert np.array_equal(augment(x, "strong", rng, 0.0, 0.0), x)
    w = augment(x, "weak", np.random.default_rng(1), 0.05)
    s = augment(x, "strong", np.random.default_rng(1), 0.2, 0.1)
    assert not np.array_equal(w, s)
    assert np.array_equal(augment(x, "strong", np.random.default_rng(4), 0.2, 0.1),
                          augment(x, "strong", np.random.default_rng(4), 0.2, 0.1))
    with pytest.raises(ValueError):
        augment(x, "medium", rng, 0.1)


def test_strong_drop_rate():
    out = augment(np.ones(20_000), "strong", np.random.default_rng(0), 0.0, 0.1)
    assert np.mean(out == 0) == pytest.approx(0.1, abs=0.01)


# S-PMiS state machine


def _view(H):
    # identity classifier with large logits scale
    return ModelView(H, nets.classify({"W": 10 * np.eye(H.shape[1])}, H), {"W": 10 * np.eye(H.shape[1])})


def _config(**kw):
    return LPDAConfig(k_top=1, **kw)


def _setup():
    # ids 0,1 oracle; 2 confident class 0; 3 unsure; 4 confident class 1
    H = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.51, 0.49], [0.0, 1.0]])
    part = DatasetPartition(5, oracle_labels={0: 0, 1: 1})
    return H, part


def test_below_phi_a_leaves_state_unchanged():
    H, part = _setup()
    bank = _filled_bank(H)
    state = PseudoState()
    # query antipodal to the unsure sample only: it is the single candidate
    spmis_step(_view(H), 0, 0, np.random.default_rng(0), state, bank, part, _config(), np.array([-0.51, -0.49]))
    assert state.add == {} and state.rev == set() and state.events == []


def test_add_branch():
    H, part = _setup()
    bank = _filled_bank(H)
    state = PseudoState()
    spmis_step(_view(H), 1, 1, np.random.default_rng(0), state, bank, part, _config(), np.array([-1.0, 0.0]),
               audit=True)
    assert state.add == {2: 0}
    assert state.events[0]["event"] == "add" and state.events[0]["id"] == 2
    assert state.violations == [] and state.checks == 1


def test_add_skipped_without_matching_oracle_label(caplog):
    H, _ = _setup()
    part = DatasetPartition(5, oracle_labels={1: 1})
    state = PseudoState()
    with caplog.at_level("DEBUG"):
        spmis_step(_view(H), 1, 1, np.random.default_rng(0), state, _filled_bank(H), part, _config(),
                   np.array([-1.0, 0.0]))
    assert state.add == {}
    assert "no oracle-labeled sample" in caplog.text


def test_mis_gate_rejects_disagreeing_blend():
    # candidate confidently class 0, but the only class-0 oracle sample sits deep in class 1
    H = np.array([[0.0, 3.0], [0.0, 1.0], [1.0, 0.0]])
    part = DatasetPartition(3, oracle_labels={0: 0, 1: 1})
    state = PseudoState()
    spmis_step(_view(H), 1, 1, np.random.default_rng(0), state, _filled_bank(H), part, _config(), np.array([-1.0, 0.0]))
    assert state.add == {}
    cfg = _config(mis_pl=False)
    spmis_step(_view(H), 1, 1, np.random.default_rng(0), state, _filled_bank(H), part, cfg, np.array([-1.0, 0.0]))
    assert state.add == {2: 0}


def test_rev_branch_and_reconcile():
    # pseudo-labeled 3 claims class 0 but its feature is strongly class 1
    H = np.array([[0.2, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 2.0]])
    part = DatasetPartition(4, oracle_labels={0: 0, 1: 1}, pseudo_labels={3: 0})
    state = PseudoState()
    spmis_step(_view(H), 3, 0, np.random.default_rng(0), state, _filled_bank(H), part, _config(),
               np.array([0.0, 1.0]), audit=True)
    assert state.rev == {3}
    assert any(e["event"] == "revise" and e["id"] == 3 for e in state.events)
    n_add, n_rev = reconcile(part, state, audit=True)
    assert n_rev == 1 and 3 not in part.pseudo_labels
    assert state.violations == []
    assert len(part.labeled_ids) == len(part.oracle_labels) + len(part.pseudo_labels)
    assert state.add == {} and state.rev == set()


def test_oracle_labels_are_never_rechecked():
    H = np.array([[0.0, 5.0], [0.0, 1.0]])
    part = DatasetPartition(2, oracle_labels={0: 0, 1: 1})
    state = PseudoState()
    spmis_step(_view(H), 0, 0, np.random.default_rng(0), state, _filled_bank(H), part, _config(), np.array([1.0, 0.0]))
    assert state.rev == set()


def test_reconcile_refuses_oracle_revocation():
    part = DatasetPartition(3, oracle_labels={0: 1}, pseudo_labels={1: 0})
    state = PseudoState(add={2: 1}, rev={0})
    reconcile(part, state, audit=True)
    assert part.oracle_labels == {0: 1}
    assert part.pseudo_labels == {1: 0, 2: 1}
    assert "an oracle label was revoked" in state.violations


def test_blend_is_exact_half_mix():
    a, b = np.array([1.0, 3.0]), np.array([2.0, -1.0])
    assert np.array_equal(blend(a, b), [1.5, 1.0])


# configs


def test_config_validation():
    with pytest.raises(ValueError):
        ActiveConfig(budget_fraction=0.0)
    with pytest.raises(ValueError):
        ActiveConfig(budget_fraction=1.5)
    with pytest.raises(ValueError):
        ActiveConfig(strategy="entropy")
    with pytest.raises(ValueError):
        LPDAConfig(epochs=0)
    with pytest.raises(ValueError):
        LPDAConfig(k_top=0)
    assert LPDAConfig(weights={"alg": 0.5}).weights == LossWeights(alg=0.5)


# end to end on a small instance


@pytest.fixture(scope="module")
def small_world():
    src_spec = DomainSpec(n=400, d_in=8, class_scale=0.7)
    tgt_spec = DomainSpec(n=300, d_in=8, class_scale=0.7, shift_angle=0.8, shift_offset=1.0, outlier_fraction=0.05)
    source = make_source(src_spec, 0)
    cfg = SourceTrainConfig(epochs_model=30, epochs_generator=300, hidden=(16,), feature_dim=8, noise_dim=4,
                            embed_dim=4, generator_hidden=(16,))
    model = pretrain_source(source, cfg, np.random.default_rng(0))
    gen = train_generator(nets.freeze(model.classifier), cfg, np.random.default_rng(1)).generator
    return model, gen, tgt_spec, src_spec


def _rngs(seed):
    return {k: np.random.default_rng([seed, i]) for i, k in
            enumerate(["augment", "mixup", "prototype", "select", "loader", "spmis"])}


def _run(small_world, seed=0, audit=False, **kw):
    model, gen, tgt_spec, src_spec = small_world
    target = make_target(tgt_spec, src_spec, 5)
    cfg = LPDAConfig(epochs=5, **kw)
    act = ActiveConfig(budget_fraction=0.1, rounds=2)
    return adapt(model.encoder, model.classifier, gen, target, cfg, act, _rngs(seed), audit=audit), target


def test_adapt_is_deterministic(small_world):
    a, _ = _run(small_world)
    b, _ = _run(small_world)
    assert a.epochs == b.epochs
    assert a.pseudo_events == b.pseudo_events
    assert np.array_equal(a.final_probs, b.final_probs)


def test_adapt_invariants_hold_under_audit(small_world):
    res, target = _run(small_world, audit=True)
    assert res.audit["violations"] == []
    assert res.audit["checks"] > 0
    assert target.oracle.calls == 30
    assert target.oracle.calls <= int(0.1 * len(target))
    assert set(res.partition.pseudo_labels).isdisjoint(res.partition.oracle_labels)
    for rec in res.epochs:
        assert rec["n_oracle"] <= 30


def test_ce_only_config_runs_without_pseudo_labels(small_world):
    off = dict(use_alg=False, use_inter=False, use_intra=False, use_mixup=False, add_pl=False)
    res, _ = _run(small_world, **off)
    assert res.pseudo_events == []
    assert all(r["n_pseudo"] == 0 for r in res.epochs)
    res0, _ = _run(small_world, weights=LossWeights(0, 0, 0, 0), add_pl=False)
    assert [r["accuracy"] for r in res0.epochs] == [r["accuracy"] for r in res.epochs]


def test_adapt_rejects_budget_too_small(small_world):
    model, gen, tgt_spec, src_spec = small_world
    target = make_target(tgt_spec, src_spec, 5)
    with pytest.raises(ValueError, match="budget"):
        adapt(model.encoder, model.classifier, gen, target, LPDAConfig(epochs=1),
              ActiveConfig(budget_fraction=0.001, rounds=5), _rngs(0))


def test_class_marginal_modes():
    from sfada.lpda import class_marginal
    part = DatasetPartition(6, oracle_labels={0: 0, 1: 0, 2: 2})
    assert class_marginal(part, 3, "uniform") is None
    np.testing.assert_allclose(class_marginal(part, 3, "oracle"), [3 / 6, 1 / 6, 2 / 6])
    with pytest.raises(ValueError):
        LPDAConfig(ot_class_marginal="learned")
