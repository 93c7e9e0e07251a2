"""Stage one: source model pretraining and source-feature generator training."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .diffmath import Graph, value_and_gradient
from .losses import ChainContrastiveParams, ce_graph, chain_graph
from .synthdata import LabeledDataset


@dataclass
class SourceTrainConfig:
    epochs_model: int = 100
    epochs_generator: int = 1000
    batch_size: int = 64
    chain_weight: float = 1.0
    chain: ChainContrastiveParams = field(default_factory=ChainContrastiveParams)
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    noise_dim: int = 16
    embed_dim: int = 16
    generator_hidden: tuple[int, ...] = (64, 64)
    generator_steps_per_epoch: int = 1
    lr: float = 0.1
    rho: float = 0.9
    eps: float = 1e-6

    def __post_init__(self):
        if isinstance(self.chain, dict):
            self.chain = ChainContrastiveParams(**self.chain)
        self.hidden = tuple(self.hidden)
        self.generator_hidden = tuple(self.generator_hidden)
        if self.epochs_model < 1 or self.epochs_generator < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 for contrastive pairs")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SourceModel:
    encoder: nets.Params
    classifier: nets.Params
    loss_trace: list[float]
    train_accuracy: float


def _model_step(enc, cls, X, y, n_classes, cfg: SourceTrainConfig):
    g = Graph()
    pe = nets.param_inputs(g, enc, "enc.")
    pc = nets.param_inputs(g, cls, "cls.")
    H = nets.encoder_graph(g, pe, g.const(X))
    loss = ce_graph(g, nets.classifier_graph(g, pc, H), np.eye(n_classes)[y])
    if cfg.chain_weight:
        chain = chain_graph(g, H, y, cfg.chain)
        if chain is not None:
            loss = loss + chain * cfg.chain_weight
    value, grads = value_and_gradient(g, {**nets.bind(enc, "enc."), **nets.bind(cls, "cls.")}, loss)
    return value, nets.collect_grads(grads, "enc."), nets.collect_grads(grads, "cls.")


def pretrain_source(data: LabeledDataset, config: SourceTrainConfig, rng: np.random.Generator,
                    init_rng: np.random.Generator | None = None) -> SourceModel:
    """Train encoder and classifier with cross-entropy plus the chain-contrastive term."""
    K = data.n_classes
    missing = sorted(set(range(K)) - set(np.unique(data.y).tolist()))
    if missing:
        raise ValueError(f"classes {missing} are absent from the source data")
    if config.chain_weight and config.chain.schedule == "proximity" and config.chain.max_gap < K - 1:
        raise ValueError(f"chain.max_gap={config.chain.max_gap} is below the largest grade gap {K - 1}")
    init_rng = init_rng or rng
    enc = nets.init_encoder(init_rng, data.X.shape[1], config.hidden, config.feature_dim)
    cls = nets.init_classifier(init_rng, config.feature_dim, K)
    opt_e = nets.AdadeltaState(config.rho, config.eps, config.lr)
    opt_c = nets.AdadeltaState(config.rho, config.eps, config.lr)
    n = len(data)
    trace = []
    for _ in range(config.epochs_model):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            value, ge, gc = _model_step(enc, cls, data.X[idx], data.y[idx], K, config)
            enc, opt_e = nets.adadelta_step(enc, ge, opt_e)
            cls, opt_c = nets.adadelta_step(cls, gc, opt_c)
            total += value * len(idx)
        trace.append(total / n)
    preds = nets.classify(cls, nets.encode(enc, data.X)).argmax(1)
    return SourceModel(enc, cls, trace, float((preds == data.y).mean()))


@dataclass
class GeneratorResult:
    generator: nets.Params
    loss_trace: list[float]


def train_generator(classifier, config: SourceTrainConfig, rng: np.random.Generator,
                    init_rng: np.random.Generator | None = None) -> GeneratorResult:
    """Fit a label-conditioned feature generator against a frozen classifier."""
    if not nets.is_frozen(classifier):
        raise ValueError("classifier must be frozen (use nets.freeze) before generator training")
    K, d = classifier["W"].shape
    init_rng = init_rng or rng
    gen = nets.init_generator(init_rng, K, config.noise_dim, config.embed_dim, config.generator_hidden, d)
    opt = nets.AdadeltaState(config.rho, config.eps, config.lr)
    trace = []
    for _ in range(config.epochs_generator):
        total = 0.0
        for _ in range(config.generator_steps_per_epoch):
            noise = rng.normal(size=(config.batch_size, config.noise_dim))
            labels = rng.integers(0, K, size=config.batch_size)
            onehot = np.eye(K)[labels]
            g = Graph()
            pg = nets.param_inputs(g, gen, "gen.")
            pc = nets.param_inputs(g, classifier, "cls.", trainable=False)
            F = nets.generator_graph(g, pg, g.const(noise), onehot)
            loss = ce_graph(g, nets.classifier_graph(g, pc, F), onehot)
            if config.chain_weight:
                chain = chain_graph(g, F, labels, config.chain)
                if chain is not None:
                    loss = loss + chain * config.chain_weight
            value, grads = value_and_gradient(g, nets.bind(gen, "gen."), loss)
            gen, opt = nets.adadelta_step(gen, nets.collect_grads(grads, "gen."), opt)
            total += value
        trace.append(total / config.generator_steps_per_epoch)
    return GeneratorResult(gen, trace)


def sample_generated(generator, n_per_class: int, n_classes: int, rng: np.random.Generator):
    labels = np.repeat(np.arange(n_classes), n_per_class)
    d_noise = generator["W0"].shape[0] - generator["E"].shape[1]
    noise = rng.normal(size=(len(labels), d_noise))
    return nets.generate(generator, noise, labels), labels


def class_similarity_matrix(features, labels, n_classes: int) -> np.ndarray:
    """Cosine similarity between per-class mean features."""
    means = np.stack([features[labels == c].mean(axis=0) for c in range(n_classes)])
    means = means / np.linalg.norm(means, axis=1, keepdims=True)
    return means @ means.T


def export_features(features, labels, path, tag: str, meta: dict | None = None) -> Path:
    """CSV dump: a ``#`` header line with n, d and tag, then one row per feature plus label."""
    features = np.asarray(features, dtype=np.float64).reshape(len(labels), -1) if len(labels) else np.zeros((0, 0))
    n, d = features.shape if len(labels) else (0, int((meta or {}).get("d", 0)))
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            extra = "".join(f" {k}={v}" for k, v in sorted((meta or {}).items()) if k != "d")
            fh.write(f"# n={n} d={d} source={tag}{extra}\n")
            w = csv.writer(fh)
            w.writerow([f"f{j}" for j in range(d)] + ["label"])
            for row, lab in zip(features, labels):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])
    except OSError as exc:
        raise OSError(f"cannot write feature dump {path}: {exc}") from exc
    return path


def read_features(path) -> tuple[np.ndarray, np.ndarray, dict]:
    lines = Path(path).read_text().splitlines()
    header = dict(tok.split("=", 1) for tok in lines[0][2:].split())
    rows = list(csv.reader(lines[2:]))
    d = int(header["d"])
    X = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64).reshape(len(rows), d)
    y = np.array([int(r[-1]) for r in rows], dtype=int)
    return X, y, header
