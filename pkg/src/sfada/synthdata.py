"""Synthetic two-domain benchmark with ordinal class geometry.

Class means sit on a helix in the first three input coordinates, so the
distance between two class means grows with their grade gap.  The target
domain applies an invertible affine shift to the same generative process and
replaces a fraction of points with far-field outliers.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

# grade counts of the 2816-image UWF set, normalised
GRADE_PROPORTIONS = tuple(float(c) / 2816 for c in (906, 553, 720, 247, 390))


@dataclass
class DomainSpec:
    n: int = 2000
    d_in: int = 32
    n_classes: int = 5
    class_scale: float = 1.0
    radius: float = 3.0
    pitch: float = 1.5
    arc_step: float = 0.6
    proportions: tuple[float, ...] = GRADE_PROPORTIONS
    shift_angle: float = 0.0
    shift_scale: float = 1.0
    shift_offset: float = 0.0
    shift_seed: int = 0
    shift_matrix: list | None = None
    shift_bias: list | None = None
    sigma_shift: float = 0.0
    outlier_fraction: float = 0.0
    outlier_width: float = 5.0

    def __post_init__(self):
        self.proportions = tuple(float(p) for p in self.proportions)
        if len(self.proportions) != self.n_classes:
            raise ValueError("one proportion per class is required")
        if any(p < 0 for p in self.proportions) or abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ValueError("class proportions must be non-negative and sum to 1")
        if not 0.0 <= self.outlier_fraction <= 0.2:
            raise ValueError("outlier fraction must lie in [0, 0.2]")
        if self.d_in < 3:
            raise ValueError("d_in must be at least 3 for the helix geometry")
        if self.arc_step * (self.n_classes - 1) > np.pi:
            raise ValueError("arc_step too large: class distances would stop growing with grade gap")
        if self.class_scale < 0:
            raise ValueError("class_scale must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def class_means(self) -> np.ndarray:
        c = np.arange(self.n_classes)
        means = np.zeros((self.n_classes, self.d_in))
        means[:, 0] = self.radius * np.cos(c * self.arc_step)
        means[:, 1] = self.radius * np.sin(c * self.arc_step)
        means[:, 2] = self.pitch * c
        return means

    def shift(self) -> tuple[np.ndarray, np.ndarray]:
        """Affine map (A, b) applied to the generative process."""
        if self.shift_matrix is not None:
            A = np.asarray(self.shift_matrix, dtype=np.float64)
        else:
            rng = np.random.default_rng(self.shift_seed)
            S = rng.normal(size=(self.d_in, self.d_in))
            S = (S - S.T) / np.linalg.norm(S - S.T, 2)
            A = self.shift_scale * expm(self.shift_angle * S)
        if self.shift_bias is not None:
            b = np.asarray(self.shift_bias, dtype=np.float64)
        else:
            rng = np.random.default_rng(self.shift_seed + 1)
            u = rng.normal(size=self.d_in)
            b = self.shift_offset * u / np.linalg.norm(u)
        if A.shape != (self.d_in, self.d_in) or b.shape != (self.d_in,):
            raise ValueError("shift matrix/bias do not match d_in")
        return A, b


def class_counts(n: int, proportions) -> np.ndarray:
    """Largest-remainder apportionment of n samples."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = n * p
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.y)


class Oracle:
    """Ground-truth lookup that audits which ids have been queried."""

    def __init__(self, labels: np.ndarray):
        self._labels = np.asarray(labels, dtype=int)
        self.queried: set[int] = set()

    def label(self, sample_id: int) -> int:
        sample_id = int(sample_id)
        if not 0 <= sample_id < len(self._labels):
            raise KeyError(f"unknown sample id {sample_id}")
        self.queried.add(sample_id)
        return int(self._labels[sample_id])

    @property
    def calls(self) -> int:
        return len(self.queried)


@dataclass
class TargetDomain:
    X: np.ndarray
    n_classes: int
    oracle: Oracle
    outliers: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.X)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self.X))

    def evaluation_labels(self) -> np.ndarray:
        """Hidden labels for scoring only; the training path never calls this."""
        return self.oracle._labels.copy()

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.oracle._labels).tobytes())
        return h.hexdigest()[:16]


def _draw_process(spec: DomainSpec, rng: np.random.Generator, n: int, proportions) -> tuple[np.ndarray, np.ndarray]:
    counts = class_counts(n, proportions)
    y = np.repeat(np.arange(spec.n_classes), counts)
    y = y[rng.permutation(n)]
    X = spec.class_means()[y] + spec.class_scale * rng.normal(size=(n, spec.d_in))
    return X, y


def make_source(spec: DomainSpec, seed: int) -> LabeledDataset:
    if spec.class_scale <= 0:
        raise ValueError("degenerate covariance: class_scale must be positive")
    rng = np.random.default_rng(seed)
    X, y = _draw_process(spec, rng, spec.n, spec.proportions)
    return LabeledDataset(X, y, spec.n_classes)


def make_target(spec: DomainSpec, source_spec: DomainSpec, seed: int) -> TargetDomain:
    """Shifted copy of the source process with outliers; labels sit behind an oracle."""
    if (spec.d_in, spec.n_classes) != (source_spec.d_in, source_spec.n_classes):
        raise ValueError("target and source specs disagree on d_in or n_classes")
    A, b = spec.shift()
    if abs(np.linalg.det(A)) < 1e-12 or np.linalg.matrix_rank(A) < spec.d_in:
        raise ValueError("shift matrix is singular")
    rng = np.random.default_rng(seed)
    X, y = _draw_process(source_spec, rng, spec.n, spec.proportions)
    X = X @ A.T + b + spec.sigma_shift * rng.normal(size=X.shape)
    n_out = int(round(spec.outlier_fraction * spec.n))
    outliers = np.zeros(spec.n, dtype=bool)
    if n_out:
        idx = rng.choice(spec.n, size=n_out, replace=False)
        outliers[idx] = True
        half = spec.outlier_width * source_spec.class_scale
        centre = X.mean(axis=0)
        X[idx] = centre + rng.uniform(-half, half, size=(n_out, spec.d_in))
        shifted_means = source_spec.class_means() @ A.T + b
        d2 = ((X[idx, None, :] - shifted_means[None]) ** 2).sum(-1)
        y[idx] = d2.argmin(axis=1)
    return TargetDomain(X, spec.n_classes, Oracle(y), outliers)


# export / import


def export_target(target: TargetDomain, spec: DomainSpec, directory) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "features": directory / "target_features.csv",
        "labels": directory / "target_labels.csv",
        "spec": directory / "target_spec.json",
    }
    with open(paths["features"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"x{j}" for j in range(target.X.shape[1])])
        for i, row in enumerate(target.X):
            w.writerow([i] + [repr(float(v)) for v in row])
    with open(paths["labels"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label", "outlier"])
        for i, (lab, out) in enumerate(zip(target.oracle._labels, target.outliers)):
            w.writerow([i, int(lab), int(out)])
    paths["spec"].write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return paths


def import_target(directory) -> tuple[TargetDomain, DomainSpec]:
    directory = Path(directory)
    spec = DomainSpec(**json.loads((directory / "target_spec.json").read_text()))
    with open(directory / "target_features.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    X = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(rows), spec.d_in)
    with open(directory / "target_labels.csv", newline="") as fh:
        lab = list(csv.reader(fh))[1:]
    y = np.array([int(r[1]) for r in lab], dtype=int)
    outliers = np.array([bool(int(r[2])) for r in lab])
    return TargetDomain(X, spec.n_classes, Oracle(y), outliers), spec
