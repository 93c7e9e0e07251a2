"""Stage three: prototype-based adaptation with pseudo-label selection.

The loop alternates active-selection rounds with supervised, prototype
contrastive, transport-consistency, intra-consistency and mixup training.
Once the active rounds are over, pseudo-labels are proposed, checked with
0.5/0.5 feature blends against oracle-labeled samples, and revoked when a
later re-check disagrees.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nets
from .active import DatasetPartition, KernelSpec, RoundRecord, local_representations, run_round
from .diffmath import Graph, value_and_gradient
from .losses import LossWeights, ce_graph, inter_graph, intra_graph, proto_graph, transport_soft_labels
from .metrics import all_metrics
from .source import sample_generated
from .synthdata import TargetDomain

log = logging.getLogger(__name__)


@dataclass
class ActiveConfig:
    budget_fraction: float = 0.05
    rounds: int = 5
    k_nn: int = 8
    kernel: str = "rbf"
    bandwidth: float | None = None
    strategy: str = "alrm"

    def __post_init__(self):
        if not 0 < self.budget_fraction <= 1:
            raise ValueError("budget_fraction must lie in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.k_nn < 1:
            raise ValueError("k_nn must be at least 1")
        if self.strategy not in ("alrm", "random"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        KernelSpec(self.kernel, self.bandwidth)

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.kernel, self.bandwidth)


@dataclass
class LPDAConfig:
    epochs: int = 15
    batch_labeled: int = 32
    batch_unlabeled: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    tau_proto: float = 0.1
    ot_eps: float = 0.05
    ot_iters: int = 200
    ot_tol: float = 1e-6
    tau_scale: float = 10.0
    ot_class_marginal: str = "uniform"  # or "oracle": class frequencies of oracle labels, add-one smoothed
    proto_ema: float = 0.99
    proto_samples: int = 16
    bank_ema: float = 0.9
    phi_a: float = 0.95
    phi_b: float = 0.80
    k_top: int = 5
    sigma_weak: float = 0.05
    sigma_strong: float = 0.2
    drop_strong: float = 0.1
    mixup_alpha: float = 0.2
    mixup_beta: float = 0.2
    pseudo_warmup: int = 1
    lr: float = 0.1
    rho: float = 0.9
    eps: float = 1e-6
    # ablation switches
    use_alg: bool = True
    use_inter: bool = True
    use_intra: bool = True
    use_mixup: bool = True
    add_pl: bool = True
    mis_pl: bool = True
    rev_pl: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be positive")
        if not (0 <= self.proto_ema <= 1 and 0 <= self.bank_ema <= 1):
            raise ValueError("EMA rates must lie in [0, 1]")
        if self.k_top < 1:
            raise ValueError("k_top must be at least 1")
        if self.ot_class_marginal not in ("uniform", "oracle"):
            raise ValueError(f"unknown ot_class_marginal {self.ot_class_marginal!r}")

    @property
    def pseudo_enabled(self) -> bool:
        return self.add_pl


# memory banks


@dataclass
class PrototypeBank:
    prototypes: np.ndarray
    beta: float = 0.99


def update_prototypes(bank: PrototypeBank, class_features: dict[int, np.ndarray]) -> PrototypeBank:
    """h_c <- beta h_c + (1 - beta) o_c for each class present in the update."""
    protos = bank.prototypes.copy()
    for c in range(len(protos)):
        if c not in class_features:
            log.info("prototype %d not updated: class missing from batch", c)
            continue
        protos[c] = bank.beta * protos[c] + (1.0 - bank.beta) * np.asarray(class_features[c])
    return PrototypeBank(protos, bank.beta)


@dataclass
class FeatureBank:
    values: np.ndarray
    rate: float = 0.9
    filled: np.ndarray | None = None

    def __post_init__(self):
        if self.filled is None:
            self.filled = np.zeros(len(self.values), dtype=bool)
        self.norms = np.linalg.norm(self.values, axis=1)

    def refresh(self, ids, vectors) -> None:
        ids = np.asarray(ids, dtype=int)
        fresh = ~self.filled[ids]
        old = self.values[ids]
        self.values[ids] = np.where(fresh[:, None], vectors, self.rate * old + (1.0 - self.rate) * vectors)
        self.norms[ids] = np.linalg.norm(self.values[ids], axis=1)
        self.filled[ids] = True


def candidates(query_lr, bank: FeatureBank, k_top: int, excluded=()) -> list[int]:
    """The k_top bank entries least cosine-similar to ``query_lr``; ties go to the lowest id."""
    if k_top < 1:
        raise ValueError("k_top must be at least 1")
    mask = bank.filled.copy()
    if isinstance(excluded, np.ndarray) and excluded.dtype == bool:
        mask &= ~excluded
    else:
        mask[np.fromiter((int(i) for i in excluded), dtype=int)] = False
    eligible = np.flatnonzero(mask)
    if eligible.size == 0:
        return []
    q = np.asarray(query_lr, dtype=np.float64)
    sims = (bank.values[eligible] @ q) / np.maximum(bank.norms[eligible] * np.linalg.norm(q), 1e-12)
    if k_top < len(eligible):
        # only entries tied with or below the k-th value can make the cut
        cut = np.partition(sims, k_top - 1)[k_top - 1]
        keep = sims <= cut
        eligible, sims = eligible[keep], sims[keep]
    order = np.lexsort((eligible, sims))
    return [int(i) for i in eligible[order[:k_top]]]


def augment(x, strength: str, rng: np.random.Generator, sigma: float, drop: float = 0.0) -> np.ndarray:
    """Gaussian jitter; the strong view also zeroes coordinates at rate ``drop``."""
    x = np.asarray(x, dtype=np.float64)
    if strength not in ("weak", "strong"):
        raise ValueError(f"unknown augmentation strength {strength!r}")
    out = x + sigma * rng.normal(size=x.shape) if sigma > 0 else x.copy()
    if strength == "strong" and drop > 0:
        out = out * (rng.random(x.shape) >= drop)
    return out


def blend(h_a, h_b) -> np.ndarray:
    """The 0.5/0.5 feature mix used to check a pseudo-label."""
    return 0.5 * np.asarray(h_a) + 0.5 * np.asarray(h_b)


# pseudo-label state machine


@dataclass
class PseudoState:
    add: dict[int, int] = field(default_factory=dict)
    rev: set[int] = field(default_factory=set)
    events: list[dict] = field(default_factory=list)
    checks: int = 0
    violations: list[str] = field(default_factory=list)


@dataclass
class ModelView:
    """Current encoder outputs and probabilities for every target sample."""

    H: np.ndarray
    P: np.ndarray
    classifier: nets.Params

    def predict_features(self, h) -> np.ndarray:
        return nets.classify(self.classifier, h)


def _partner(partition: DatasetPartition, label: int, rng: np.random.Generator, prefer: int | None = None):
    if prefer is not None and partition.oracle_labels.get(prefer) == label:
        return prefer
    same = sorted(i for i, y in partition.oracle_labels.items() if y == label)
    if not same:
        return None
    return int(same[rng.integers(len(same))])


def spmis_step(view: ModelView, x_tl: int, y_tl: int, rng: np.random.Generator, state: PseudoState,
               bank: FeatureBank, partition: DatasetPartition, config: LPDAConfig, query_lr: np.ndarray,
               epoch: int = 0, audit: bool = False, blocked: np.ndarray | None = None) -> PseudoState:
    """One pass of the add / re-check / revoke machine for labeled sample ``x_tl``.

    ``blocked`` is an optional boolean mask of ids that may not become candidates;
    it is kept in step with ``state.add`` when given.
    """
    is_pseudo = x_tl in partition.pseudo_labels
    if is_pseudo and config.rev_pl and x_tl not in state.rev:
        partner = _partner(partition, y_tl, rng)
        if partner is not None:
            x_s = blend(view.H[x_tl], view.H[partner])
            if audit:
                _audit_blend(state, x_s, view.H[x_tl], view.H[partner])
            y_s = int(view.predict_features(x_s).argmax())
            if y_s != y_tl:
                state.rev.add(x_tl)
                state.events.append({"event": "revise", "epoch": epoch, "id": int(x_tl), "label": int(y_tl),
                                     "mix_pred": y_s})
    if blocked is None:
        blocked = set(partition.oracle_labels) | set(partition.pseudo_labels) | set(state.add)
    pool = candidates(query_lr, bank, config.k_top, blocked)
    if not pool:
        return state
    x_r = pool[int(rng.integers(len(pool)))]
    p_r = view.P[x_r]
    y_r = int(p_r.argmax())
    if p_r[y_r] < config.phi_a:
        return state
    if not config.mis_pl:
        _accept(state, blocked, x_r, y_r)
        state.events.append({"event": "add", "epoch": epoch, "id": int(x_r), "label": y_r,
                             "confidence": float(p_r[y_r])})
        return state
    partner = _partner(partition, y_r, rng, prefer=x_tl if x_tl in partition.oracle_labels else None)
    if partner is None:
        log.debug("no oracle-labeled sample with label %d; add skipped for %d", y_r, x_r)
        return state
    x_s = blend(view.H[x_r], view.H[partner])
    if audit:
        _audit_blend(state, x_s, view.H[x_r], view.H[partner])
    p_s = view.predict_features(x_s)
    y_s = int(p_s.argmax())
    if p_s[y_s] > config.phi_b and y_s == y_r:
        _accept(state, blocked, x_r, y_r)
        state.events.append({"event": "add", "epoch": epoch, "id": int(x_r), "label": y_r,
                             "confidence": float(p_r[y_r]), "mix_confidence": float(p_s[y_s])})
    return state


def _accept(state: PseudoState, blocked, x_r: int, y_r: int) -> None:
    state.add[x_r] = y_r
    if isinstance(blocked, np.ndarray):
        blocked[x_r] = True


def _audit_blend(state: PseudoState, x_s, h_a, h_b) -> None:
    state.checks += 1
    expected = np.array([0.5 * a + 0.5 * b for a, b in zip(h_a, h_b)])
    if not np.array_equal(x_s, expected):
        state.violations.append("mixed sample is not the exact 0.5/0.5 blend")


def reconcile(partition: DatasetPartition, state: PseudoState, audit: bool = False) -> tuple[int, int]:
    """S <- S minus revoked plus added; clears both sets."""
    if audit:
        state.checks += 1
        if set(state.add) & state.rev:
            state.violations.append("add and revise sets overlap")
        if state.rev & set(partition.oracle_labels):
            state.violations.append("an oracle label was revoked")
    revoked = state.rev - set(partition.oracle_labels)
    for i in revoked:
        partition.pseudo_labels.pop(i, None)
    for i, y in state.add.items():
        if i not in partition.oracle_labels:
            partition.pseudo_labels[i] = y
    n_add, n_rev = len(state.add), len(revoked)
    state.add = {}
    state.rev = set()
    return n_add, n_rev


# training


@dataclass
class AdaptResult:
    encoder: nets.Params
    classifier: nets.Params
    epochs: list[dict]
    selection: list[RoundRecord]
    pseudo_events: list[dict]
    partition: DatasetPartition
    final_probs: np.ndarray
    audit: dict


def _forward_all(enc, cls, X):
    H = nets.encode(enc, X)
    return H, nets.classify(cls, H)


def class_marginal(partition: DatasetPartition, K: int, mode: str) -> np.ndarray | None:
    if mode == "uniform":
        return None
    counts = np.bincount(np.fromiter(partition.oracle_labels.values(), dtype=int), minlength=K) + 1.0
    return counts / counts.sum()


def _train_step(enc, cls, batch, config: LPDAConfig, bank: PrototypeBank, K: int, rngs, marginal=None):
    X_l, y_l, X_u = batch
    w = config.weights
    g = Graph()
    pe = nets.param_inputs(g, enc, "enc.")
    pc = nets.param_inputs(g, cls, "cls.")
    onehot = np.eye(K)[y_l]
    H_l = nets.encoder_graph(g, pe, g.const(X_l))
    terms = {"ce": ce_graph(g, nets.classifier_graph(g, pc, H_l), onehot)}
    if config.use_alg and w.alg:
        terms["alg"] = proto_graph(g, H_l, bank.prototypes, y_l, config.tau_proto)
    need_u = (config.use_inter and w.inter) or (config.use_intra and w.intra)
    if need_u and len(X_u):
        rng = rngs["augment"]
        X_w = augment(X_u, "weak", rng, config.sigma_weak)
        X_s = augment(X_u, "strong", rng, config.sigma_strong, config.drop_strong)
        H_w = nets.encoder_graph(g, pe, g.const(X_w))
        z_s = nets.classifier_graph(g, pc, nets.encoder_graph(g, pe, g.const(X_s)))
        if config.use_inter and w.inter:
            soft = transport_soft_labels(nets.encode(enc, X_w), bank.prototypes, config.ot_eps, config.tau_scale,
                                         config.ot_iters, config.ot_tol, class_marginal=marginal)
            terms["inter"] = inter_graph(g, soft, z_s)
        if config.use_intra and w.intra:
            terms["intra"] = intra_graph(g, nets.classifier_graph(g, pc, H_w), z_s)
    if config.use_mixup and w.mix and len(X_l) > 1:
        rng = rngs["mixup"]
        perm = rng.permutation(len(X_l))
        lam = rng.beta(config.mixup_alpha, config.mixup_beta, size=len(X_l))
        X_mix = lam[:, None] * X_l + (1 - lam[:, None]) * X_l[perm]
        y_mix = lam[:, None] * onehot + (1 - lam[:, None]) * onehot[perm]
        terms["mix"] = ce_graph(g, nets.classifier_graph(g, pc, nets.encoder_graph(g, pe, g.const(X_mix))), y_mix)
    loss = terms["ce"]
    for name in ("alg", "inter", "intra", "mix"):
        if name in terms:
            loss = loss + terms[name] * getattr(w, name)
    value, grads = value_and_gradient(g, {**nets.bind(enc, "enc."), **nets.bind(cls, "cls.")}, loss)
    return value, nets.collect_grads(grads, "enc."), nets.collect_grads(grads, "cls.")


def adapt(encoder, classifier, generator, target: TargetDomain, config: LPDAConfig, active: ActiveConfig,
          rngs: dict[str, np.random.Generator], audit: bool = False) -> AdaptResult:
    """Alternate active rounds with adaptation epochs; returns the adapted model and per-epoch records."""
    K = target.n_classes
    n = len(target)
    X = target.X
    truth = target.evaluation_labels()  # scoring only
    enc = {k: np.array(v) for k, v in encoder.items()}
    cls = {k: np.array(v) for k, v in classifier.items()}
    opt_e = nets.AdadeltaState(config.rho, config.eps, config.lr)
    opt_c = nets.AdadeltaState(config.rho, config.eps, config.lr)
    budget_total = int(math.floor(active.budget_fraction * n))
    per_round = budget_total // active.rounds
    if per_round < 1:
        raise ValueError("budget too small for the configured number of rounds")
    kernel = active.kernel_spec()
    pseudo_start = active.rounds + config.pseudo_warmup

    gen_feats, gen_labels = sample_generated(generator, config.proto_samples, K, rngs["prototype"])
    bank = PrototypeBank(np.stack([gen_feats[gen_labels == c].mean(0) for c in range(K)]), config.proto_ema)
    fbank = None
    partition = DatasetPartition(n)
    state = PseudoState()
    selection: list[RoundRecord] = []
    epochs: list[dict] = []

    for epoch in range(config.epochs):
        if epoch < active.rounds:
            H, P = _forward_all(enc, cls, X)
            lrs, _ = local_representations(H, P, cls["W"], active.k_nn)
            selection.append(run_round(partition, target.oracle, lrs, per_round, epoch, kernel,
                                       active.strategy, rngs["select"]))
        if not partition.labeled_ids:
            raise ValueError("no labeled target samples: run at least one active round first")
        pseudo_on = config.pseudo_enabled and epoch >= pseudo_start
        if pseudo_on and fbank is None:
            H, P = _forward_all(enc, cls, X)
            lrs, _ = local_representations(H, P, cls["W"], active.k_nn)
            fbank = FeatureBank(np.zeros_like(lrs), config.bank_ema)
            fbank.refresh(np.arange(n), lrs)
        unl = np.array(sorted(set(range(n)) - set(partition.oracle_labels)), dtype=int)
        iterations = max(1, math.ceil(len(unl) / config.batch_unlabeled))
        order_u = rngs["loader"].permutation(unl)
        S = np.array(partition.labeled_ids, dtype=int)
        order_s = rngs["loader"].permutation(S)
        ptr = 0
        losses = []
        adds = revs = 0
        for it in range(iterations):
            feats, labs = sample_generated(generator, config.proto_samples, K, rngs["prototype"])
            bank = update_prototypes(bank, {c: feats[labs == c].mean(0) for c in range(K)})
            ids_l = order_s[ptr : ptr + config.batch_labeled]
            ptr += config.batch_labeled
            pass_done = ptr >= len(order_s)
            y_l = np.array([_label_of(partition, i) for i in ids_l], dtype=int)
            ids_u = order_u[it * config.batch_unlabeled : (it + 1) * config.batch_unlabeled]
            value, ge, gc = _train_step(enc, cls, (X[ids_l], y_l, X[ids_u]), config, bank, K, rngs,
                                         class_marginal(partition, K, config.ot_class_marginal))
            enc, opt_e = nets.adadelta_step(enc, ge, opt_e)
            cls, opt_c = nets.adadelta_step(cls, gc, opt_c)
            losses.append(value)
            if pseudo_on:
                H, P = _forward_all(enc, cls, X)
                touched = np.concatenate([ids_u, ids_l]).astype(int)
                lr_t, _ = local_representations(H, P, cls["W"], active.k_nn, touched)
                fbank.refresh(touched, lr_t)
                view = ModelView(H, P, cls)
                query = dict(zip(touched.tolist(), lr_t))
                blocked = np.zeros(n, dtype=bool)
                blocked[list(partition.oracle_labels) + list(partition.pseudo_labels) + list(state.add)] = True
                for i, y in zip(ids_l.tolist(), y_l.tolist()):
                    spmis_step(view, i, y, rngs["spmis"], state, fbank, partition, config, query[i], epoch, audit,
                               blocked)
            if pass_done:
                if pseudo_on:
                    a, r = reconcile(partition, state, audit)
                    adds, revs = adds + a, revs + r
                S = np.array(partition.labeled_ids, dtype=int)
                order_s = rngs["loader"].permutation(S)
                ptr = 0
        if pseudo_on and (state.add or state.rev):
            a, r = reconcile(partition, state, audit)
            adds, revs = adds + a, revs + r
        if audit:
            state.checks += 1
            n_s = len(partition.labeled_ids)
            if n_s != len(partition.oracle_labels) + len(partition.pseudo_labels):
                state.violations.append("pool size differs from oracle plus pseudo counts")
        _, P = _forward_all(enc, cls, X)
        m = all_metrics(P, truth, K)
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "accuracy": m["accuracy"],
            "macro_f1": m["macro_f1"],
            "auc": m["auc"],
            "kappa": m["kappa"],
            "qwk": m["qwk"],
            "n_oracle": len(partition.oracle_labels),
            "n_pseudo": len(partition.pseudo_labels),
            "pseudo_added": adds,
            "pseudo_revoked": revs,
            "pseudo_precision": _precision(partition.pseudo_labels, truth),
        }
        epochs.append(record)
        log.info("epoch %d acc %.4f qwk %s pseudo %d", epoch, m["accuracy"], m["qwk"], record["n_pseudo"])
    _, P = _forward_all(enc, cls, X)
    audit_info = {"checks": state.checks, "violations": list(state.violations)}
    return AdaptResult(enc, cls, epochs, selection, state.events, partition, P, audit_info)


def _label_of(partition: DatasetPartition, i: int) -> int:
    if i in partition.oracle_labels:
        return partition.oracle_labels[i]
    return partition.pseudo_labels[i]


def _precision(pseudo: dict[int, int], truth: np.ndarray) -> float | None:
    if not pseudo:
        return None
    return float(np.mean([truth[i] == y for i, y in pseudo.items()]))


def config_dict(config) -> dict:
    d = asdict(config)
    return d
