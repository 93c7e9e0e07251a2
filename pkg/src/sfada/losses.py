"""Loss terms for source training and adaptation.

Each loss exists twice: a direct numpy evaluation (used for reporting and
as a reference in tests) and a graph builder used during training so the
gradient comes from :mod:`sfada.diffmath`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .diffmath import Graph, Var


@dataclass(frozen=True)
class ChainContrastiveParams:
    tau: float = 0.1
    gamma: float = 0.1
    beta0: float = 0.1
    # "proximity": beta0 * (max_gap - gap), near grades repelled least; "gap": beta0 * gap
    schedule: str = "proximity"
    max_gap: int = 4

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not (np.isfinite(self.gamma) and np.isfinite(self.beta0)):
            raise ValueError("margins must be finite")
        if self.schedule not in ("proximity", "gap"):
            raise ValueError(f"unknown margin schedule {self.schedule!r}")
        if self.max_gap < 1:
            raise ValueError("max_gap must be at least 1")

    def negative_margins(self, grade_dist) -> np.ndarray:
        """Per-negative margin from the grade gap to the anchor; subtracted from the negative's similarity."""
        gap = np.abs(np.asarray(grade_dist, dtype=np.float64))
        if self.schedule == "gap":
            return self.beta0 * gap
        if np.any(gap > self.max_gap):
            raise ValueError(f"grade gap exceeds max_gap={self.max_gap}")
        return self.beta0 * (self.max_gap - gap)


@dataclass(frozen=True)
class LossWeights:
    alg: float = 1.0
    inter: float = 1.0
    intra: float = 1.0
    mix: float = 1.0

    def __post_init__(self):
        for name in ("alg", "inter", "intra", "mix"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class TransportPlan:
    plan: np.ndarray
    a: np.ndarray
    b: np.ndarray
    eps: float
    iterations: int
    violation: float
    converged: bool


def _unit(v, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError(f"zero-norm {what}")
    return v / n


# cross-entropy


def cross_entropy(p, y) -> float:
    """-sum_k y_k log p_k; soft targets allowed."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    support = y > 0
    if np.any(p[support] <= 0):
        raise ValueError("probability is zero where the target has mass")
    return float(-(y[support] * np.log(p[support])).sum())


def ce_graph(g: Graph, logits: Var, targets: np.ndarray) -> Var:
    """Mean cross-entropy of a batch of logits against (soft) target rows."""
    return -g.mean(g.sum(g.log_softmax(logits) * np.asarray(targets, dtype=np.float64), axis=1))


# chain contrastive


def chain_contrastive(anchor, positive, negatives, neg_grade_dist, params: ChainContrastiveParams, betas=None) -> float:
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim != 2 or len(negatives) == 0:
        raise ValueError("chain contrastive loss needs at least one negative")
    p = _unit(anchor, "anchor")
    kp = _unit(positive, "positive")
    kn = _unit(negatives, "negative")
    if betas is None:
        betas = params.negative_margins(neg_grade_dist)
    betas = np.asarray(betas, dtype=np.float64)
    if betas.shape != (len(negatives),):
        raise ValueError("one margin per negative is required")
    pos = (p @ kp - params.gamma) / params.tau
    neg = (kn @ p - betas) / params.tau
    return float(logsumexp(np.concatenate([[pos], neg])) - pos)


def chain_pairs(labels) -> tuple[np.ndarray, np.ndarray]:
    """Positive index per anchor (next same-class batch mate, cyclically) and validity."""
    labels = np.asarray(labels)
    n = len(labels)
    pos = np.full(n, -1)
    for i in range(n):
        for step in range(1, n):
            j = (i + step) % n
            if labels[j] == labels[i]:
                pos[i] = j
                break
    has_neg = np.array([np.any(labels != labels[i]) for i in range(n)], dtype=bool)
    return pos, (pos >= 0) & has_neg


def chain_graph(g: Graph, feats: Var, labels, params: ChainContrastiveParams) -> Var | None:
    """Batch chain-contrastive loss averaged over anchors with a positive and a negative.

    Returns ``None`` when no anchor qualifies.
    """
    labels = np.asarray(labels)
    pos, valid = chain_pairs(labels)
    if not valid.any():
        return None
    n = len(labels)
    grade_gap = np.abs(labels[:, None] - labels[None, :]).astype(np.float64)
    pos_mask = np.zeros((n, n), dtype=bool)
    pos_mask[np.arange(n)[valid], pos[valid]] = True
    neg_mask = labels[:, None] != labels[None, :]
    margin = np.where(pos_mask, params.gamma, params.negative_margins(grade_gap))
    keep = pos_mask | neg_mask
    sim = g.cosine(feats, feats)
    z = (sim - margin) * (1.0 / params.tau)
    rows = np.flatnonzero(valid)
    # restrict to qualifying anchors by a constant row-selection matmul
    select = np.zeros((len(rows), n))
    select[np.arange(len(rows)), rows] = 1.0
    z_rows = g.matmul(select, z)
    lse = g.logsumexp(z_rows, keep[rows])
    pos_logit = g.sum(z_rows * pos_mask[rows].astype(np.float64), axis=1)
    return g.mean(lse - pos_logit)


# prototype contrastive


def prototype_contrastive(h, prototypes, label: int, tau: float) -> float:
    prototypes = np.asarray(prototypes, dtype=np.float64)
    K = len(prototypes)
    if K < 2:
        raise ValueError("prototype contrastive loss needs at least two prototypes")
    if not 0 <= label < K:
        raise ValueError(f"label {label} out of range")
    s = _unit(prototypes, "prototype") @ _unit(h, "feature") / tau
    return float(logsumexp(s) - s[label])


def proto_graph(g: Graph, feats: Var, prototypes: np.ndarray, labels, tau: float) -> Var:
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if len(prototypes) < 2:
        raise ValueError("prototype contrastive loss needs at least two prototypes")
    onehot = np.eye(len(prototypes))[np.asarray(labels)]
    z = g.cosine(feats, g.const(prototypes)) * (1.0 / tau)
    return g.mean(g.logsumexp(z) - g.sum(z * onehot, axis=1))


# optimal transport


def _lse(z, axis):
    # scipy's logsumexp carries array-API overhead that dominates on tiny inputs
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(cost, a, b, eps: float = 0.05, max_iters: int = 200, tol: float = 1e-6) -> TransportPlan:
    """Entropic transport plan by log-domain Sinkhorn iterations."""
    C = np.asarray(cost, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("marginals must be strictly positive")
    if abs(a.sum() - 1) > 1e-9 or abs(b.sum() - 1) > 1e-9:
        raise ValueError("marginals must each sum to 1")
    if C.shape != (len(a), len(b)):
        raise ValueError(f"cost shape {C.shape} does not match marginals ({len(a)}, {len(b)})")
    log_a, log_b = np.log(a), np.log(b)
    f = np.zeros(len(a))
    gpot = np.zeros(len(b))
    violation = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        f = eps * (log_a - _lse((gpot[None, :] - C) / eps, axis=1))
        gpot = eps * (log_b - _lse((f[:, None] - C) / eps, axis=0))
        plan = np.exp((f[:, None] + gpot[None, :] - C) / eps)
        violation = max(np.abs(plan.sum(1) - a).max(), np.abs(plan.sum(0) - b).max())
        if violation < tol:
            break
    plan = _round_to_marginals(np.exp((f[:, None] + gpot[None, :] - C) / eps), a, b)
    return TransportPlan(plan, a, b, eps, it, float(violation), bool(violation < tol))


def _round_to_marginals(plan, a, b):
    """Project onto the transport polytope (Altschuler, Weed and Rigollet, 2017); L1 change bounded by the violation."""
    plan = plan * np.minimum(a / plan.sum(1), 1.0)[:, None]
    plan = plan * np.minimum(b / plan.sum(0), 1.0)[None, :]
    err_a, err_b = a - plan.sum(1), b - plan.sum(0)
    mass = err_a.sum()
    if mass > 0:
        plan = plan + np.outer(err_a, err_b) / mass
    return plan


def transport_soft_labels(weak_feats, prototypes, eps: float = 0.05, tau_scale: float = 10.0,
                          max_iters: int = 200, tol: float = 1e-6, class_marginal=None) -> np.ndarray:
    """Soft class labels from transporting weak-view features onto the prototypes.

    The class marginal defaults to uniform.
    """
    hw = _unit(weak_feats, "feature")
    if hw.ndim == 1:
        hw = hw[None, :]
    P = _unit(prototypes, "prototype")
    n, K = len(hw), len(P)
    cost = 1.0 - hw @ P.T
    b = np.full(K, 1.0 / K) if class_marginal is None else np.asarray(class_marginal, dtype=np.float64)
    tp = sinkhorn(cost, np.full(n, 1.0 / n), b, eps, max_iters, tol)
    # rows of the plan carry mass 1/n; rescale to a per-sample assignment
    q = tp.plan * n
    z = tau_scale * q
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def inter_consistency(weak_feats, prototypes, strong_logits, eps: float = 0.05, tau_scale: float = 10.0) -> float:
    strong_logits = np.atleast_2d(np.asarray(strong_logits, dtype=np.float64))
    if len(strong_logits) < 1:
        raise ValueError("batch must be non-empty")
    soft = transport_soft_labels(weak_feats, prototypes, eps, tau_scale)
    return float(np.abs(soft - _softmax(strong_logits)).sum(axis=1).mean())


def inter_graph(g: Graph, soft_labels: np.ndarray, strong_logits: Var) -> Var:
    return g.mean(g.l1_distance(g.const(soft_labels), g.softmax(strong_logits)))


# intra-domain consistency


def intra_consistency(p_w, p_s) -> float:
    """Off-diagonal mass of the outer product p_w p_s^T; batch rows are averaged."""
    p_w = np.atleast_2d(np.asarray(p_w, dtype=np.float64))
    p_s = np.atleast_2d(np.asarray(p_s, dtype=np.float64))
    if np.any(np.abs(p_w.sum(1) - 1) > 1e-9) or np.any(np.abs(p_s.sum(1) - 1) > 1e-9):
        raise ValueError("inputs must be probability vectors")
    vals = [np.outer(w, s).sum() - np.trace(np.outer(w, s)) for w, s in zip(p_w, p_s)]
    return float(np.mean(vals))


def intra_graph(g: Graph, logits_w: Var, logits_s: Var) -> Var:
    pw = g.softmax(logits_w)
    ps = g.softmax(logits_s)
    # per row: sum(outer(pw, ps)) - trace(outer(pw, ps))
    return g.mean(g.sum(pw, axis=1) * g.sum(ps, axis=1) - g.sum(pw * ps, axis=1))


def intra_single_graph(g: Graph, p_w: Var, p_s: Var) -> Var:
    o = g.outer(p_w, p_s)
    return g.sum(o) - g.trace(o)


# mixup


def mixup(x_i, y_i, x_j, y_j, alpha: float, beta: float, rng: np.random.Generator | None = None, lam=None):
    """Convex blend of two samples and their label vectors with lam ~ Beta(alpha, beta)."""
    if lam is None:
        if alpha <= 0 or beta <= 0:
            raise ValueError("Beta parameters must be positive")
        lam = rng.beta(alpha, beta)
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    y_i, y_j = np.asarray(y_i, dtype=np.float64), np.asarray(y_j, dtype=np.float64)
    lam_x = np.reshape(lam, np.shape(lam) + (1,) * (x_i.ndim - np.ndim(lam)))
    lam_y = np.reshape(lam, np.shape(lam) + (1,) * (y_i.ndim - np.ndim(lam)))
    return lam_x * x_i + (1 - lam_x) * x_j, lam_y * y_i + (1 - lam_y) * y_j, lam


# total


TERM_ORDER = ("ce", "alg", "inter", "intra", "mix")


def total_loss(terms: Mapping[str, float] | Sequence[float], weights: LossWeights) -> float:
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    if not isinstance(terms, Mapping):
        terms = dict(zip(TERM_ORDER, terms))
    return (
        terms["ce"]
        + weights.alg * terms.get("alg", 0.0)
        + weights.inter * terms.get("inter", 0.0)
        + weights.intra * terms.get("intra", 0.0)
        + weights.mix * terms.get("mix", 0.0)
    )


def total_graph(g: Graph, terms: Mapping[str, Var | None], weights: LossWeights) -> Var:
    out = terms["ce"]
    for name in TERM_ORDER[1:]:
        w = getattr(weights, name)
        t = terms.get(name)
        if t is not None and w != 0:
            out = out + t * w
    return out
