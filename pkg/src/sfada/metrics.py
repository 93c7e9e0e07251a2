"""Grading metrics: accuracy, recall, macro F1, one-vs-rest AUC, kappa."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def confusion(preds, truths, n_classes: int) -> np.ndarray:
    """K x K counts; rows are truth, columns prediction."""
    preds = np.asarray(preds, dtype=int)
    truths = np.asarray(truths, dtype=int)
    if preds.shape != truths.shape:
        raise ValueError("preds and truths must have equal length")
    for name, v in (("pred", preds), ("truth", truths)):
        if v.size and (v.min() < 0 or v.max() >= n_classes):
            raise ValueError(f"{name} class out of range [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (truths, preds), 1)
    return cm


@dataclass
class Summary:
    accuracy: float
    recall: list[float]
    f1: list[float]
    macro_f1: float
    undefined: list[int] = field(default_factory=list)


def summary(cm) -> Summary:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm)
    rows, cols = cm.sum(1), cm.sum(0)
    recall, f1, undefined = [], [], []
    for k in range(len(cm)):
        r = tp[k] / rows[k] if rows[k] else None
        p = tp[k] / cols[k] if cols[k] else None
        if r is None:
            undefined.append(k)
        recall.append(r or 0.0)
        if r is None and p is None:
            f1.append(0.0)
        elif not r or not p:
            f1.append(0.0)
        else:
            f1.append(2 * p * r / (p + r))
    return Summary(float(tp.sum() / total), [float(v) for v in recall], [float(v) for v in f1],
                   float(np.mean(f1)), undefined)


@dataclass
class RocResult:
    auc: list[float | None]
    macro_auc: float | None
    curves: list[tuple[np.ndarray, np.ndarray] | None]
    excluded: list[int]


def _roc_curve(score, positive) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-score, kind="stable")
    s, pos = score[order], positive[order]
    # one ROC point per distinct threshold so ties move diagonally
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(pos)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / pos.sum()]
    fpr = np.r_[0.0, fps / (~pos).sum()]
    return fpr, tpr


def roc_auc(scores, truths) -> RocResult:
    """One-vs-rest trapezoidal AUC per class and their macro mean."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=int)
    K = scores.shape[1]
    aucs, curves, excluded = [], [], []
    for k in range(K):
        pos = truths == k
        if pos.all() or not pos.any():
            aucs.append(None)
            curves.append(None)
            excluded.append(k)
            continue
        fpr, tpr = _roc_curve(scores[:, k], pos)
        aucs.append(float(np.trapezoid(tpr, fpr)))
        curves.append((fpr, tpr))
    defined = [a for a in aucs if a is not None]
    return RocResult(aucs, float(np.mean(defined)) if defined else None, curves, excluded)


def write_roc_csv(result: RocResult, directory, header_meta: dict | None = None) -> list[Path]:
    paths = []
    for k, curve in enumerate(result.curves):
        if curve is None:
            continue
        path = Path(directory) / f"roc_{k}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            if header_meta:
                fh.write("# " + " ".join(f"{a}={b}" for a, b in sorted(header_meta.items())) + "\n")
            w.writerow(["fpr", "tpr"])
            for f, t in zip(*curve):
                w.writerow([repr(float(f)), repr(float(t))])
        paths.append(path)
    return paths


def kappa(cm, weighting: str = "none") -> float | None:
    """Cohen's kappa; ``weighting='quadratic'`` gives QWK.  None when undefined."""
    O = np.asarray(cm, dtype=np.float64)
    K = len(O)
    total = O.sum()
    if total <= 0:
        raise ValueError("kappa needs a non-empty confusion matrix")
    i, j = np.indices((K, K))
    if weighting == "none":
        w = (i != j).astype(np.float64)
    elif weighting == "quadratic":
        w = ((i - j) / (K - 1)) ** 2
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    E = np.outer(O.sum(1), O.sum(0)) / total
    expected = (w * E).sum()
    if expected == 0:
        return None
    return float(1.0 - (w * O).sum() / expected)


def all_metrics(probs, truths, n_classes: int) -> dict:
    probs = np.asarray(probs)
    cm = confusion(probs.argmax(1), truths, n_classes)
    s = summary(cm)
    roc = roc_auc(probs, truths)
    return {
        "accuracy": s.accuracy,
        "macro_f1": s.macro_f1,
        "recall": s.recall,
        "auc": roc.macro_auc,
        "auc_excluded": roc.excluded,
        "kappa": kappa(cm),
        "qwk": kappa(cm, "quadratic"),
        "confusion": cm.tolist(),
    }
