"""Active selection by local-representation matching.

Local representations average each sample's nearest neighbours after
reweighting them by the probability-projected classifier rows.  Samples are
then picked greedily so the labeled set's kernel mean embedding stays close
to that of the whole target set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("explicit bandwidth must be positive")

    def resolve(self, X: np.ndarray) -> "KernelSpec":
        """Fix the median-heuristic bandwidth on ``X``."""
        if self.kind != "rbf" or self.bandwidth is not None:
            return self
        return KernelSpec("rbf", median_bandwidth(X))

    def matrix(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        A, B = np.atleast_2d(A), np.atleast_2d(B)
        if self.kind == "linear":
            return A @ B.T
        if self.bandwidth is None:
            raise ValueError("resolve the rbf bandwidth first")
        d2 = _sq_dists(A, B)
        return np.exp(-d2 / (2.0 * self.bandwidth**2))


def _sq_dists(A, B):
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def median_bandwidth(X: np.ndarray, max_points: int = 1000) -> float:
    X = np.atleast_2d(X)
    if len(X) > max_points:
        # evenly spaced subsample keeps this a pure function of X
        X = X[np.linspace(0, len(X) - 1, max_points).astype(int)]
    d = np.sqrt(_sq_dists(X, X)[np.triu_indices(len(X), 1)])
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


@dataclass
class LocalRepresentation:
    vector: np.ndarray
    owner: int
    neighbors: np.ndarray


def nearest_neighbors(features: np.ndarray, k_nn: int, queries: Sequence[int] | None = None) -> np.ndarray:
    """Cosine k-nearest neighbours; each sample is its own first neighbour."""
    H = np.asarray(features, dtype=np.float64)
    n = len(H)
    if not 1 <= k_nn <= n:
        raise ValueError(f"k_nn={k_nn} must lie in [1, {n}]")
    Hn = H / np.maximum(np.linalg.norm(H, axis=1, keepdims=True), 1e-12)
    q = np.arange(n) if queries is None else np.asarray(queries, dtype=int)
    S = Hn[q] @ Hn.T
    S[np.arange(len(q)), q] = np.inf
    if k_nn < n:
        part = np.argpartition(-S, k_nn - 1, axis=1)[:, :k_nn]
    else:
        part = np.tile(np.arange(n), (len(q), 1))
    # order the k candidates by similarity, lowest id first on ties
    vals = np.take_along_axis(S, part, axis=1)
    order = np.lexsort((part, -vals), axis=1)
    return np.take_along_axis(part, order, axis=1)


def local_representations(features, probs, W, k_nn: int, queries=None) -> tuple[np.ndarray, np.ndarray]:
    """LR rows (and neighbour ids) for ``queries`` (default: every sample)."""
    H = np.asarray(features, dtype=np.float64)
    P = np.asarray(probs, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    nbrs = nearest_neighbors(H, k_nn, queries)
    per_sample = H * (P @ W) + H
    return per_sample[nbrs].mean(axis=1), nbrs


def local_representation(sample_id: int, features, probs, W, k_nn: int) -> LocalRepresentation:
    lr, nbrs = local_representations(features, probs, W, k_nn, [sample_id])
    return LocalRepresentation(lr[0], int(sample_id), nbrs[0])


def mmd_squared(A, B, kernel: KernelSpec = KernelSpec()) -> float:
    """Biased estimate mean k(A,A) + mean k(B,B) - 2 mean k(A,B)."""
    A, B = np.atleast_2d(np.asarray(A, dtype=np.float64)), np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.size == 0 or B.size == 0:
        raise ValueError("MMD needs two non-empty sets")
    kernel = kernel.resolve(np.vstack([A, B]))
    return float(kernel.matrix(A, A).mean() + kernel.matrix(B, B).mean() - 2.0 * kernel.matrix(A, B).mean())


def greedy_select(all_lrs, labeled_ids: Iterable[int], budget: int, kernel: KernelSpec = KernelSpec(),
                  candidates: Iterable[int] | None = None) -> list[int]:
    """Greedily add the candidate minimising MMD^2(all, labeled + picked + candidate).

    Ties go to the lowest sample id.
    """
    X = np.asarray(all_lrs, dtype=np.float64)
    n = len(X)
    labeled = sorted(set(int(i) for i in labeled_ids))
    if candidates is None:
        pool = np.array(sorted(set(range(n)) - set(labeled)), dtype=int)
    else:
        pool = np.array(sorted(set(int(i) for i in candidates) - set(labeled)), dtype=int)
    if budget <= 0:
        return []
    if budget > len(pool):
        raise ValueError(f"budget {budget} exceeds the {len(pool)} unlabeled candidates")
    kernel = kernel.resolve(X)
    Kmat = kernel.matrix(X, X)
    k_tt = Kmat.mean()
    col = Kmat.sum(axis=0)  # sum_t k(t, c)
    diag = np.diag(Kmat).copy()
    members = list(labeled)
    k_m = Kmat[:, members].sum(axis=1) if members else np.zeros(n)  # sum_{j in M} k(c, j)
    s_mm = float(Kmat[np.ix_(members, members)].sum()) if members else 0.0
    r_m = float(col[members].sum()) if members else 0.0
    available = np.ones(len(pool), dtype=bool)
    picked: list[int] = []
    for _ in range(budget):
        m = len(members) + 1
        c = pool[available]
        within = s_mm + 2.0 * k_m[c] + diag[c]
        cross = r_m + col[c]
        scores = k_tt + within / m**2 - 2.0 * cross / (n * m)
        best = int(c[np.argmin(scores)])
        picked.append(best)
        members.append(best)
        s_mm += 2.0 * k_m[best] + diag[best]
        r_m += col[best]
        k_m = k_m + Kmat[:, best]
        available[np.searchsorted(pool, best)] = False
    return picked


def random_select(unlabeled_ids: Iterable[int], budget: int, rng: np.random.Generator) -> list[int]:
    pool = np.array(sorted(int(i) for i in unlabeled_ids), dtype=int)
    if budget > len(pool):
        raise ValueError(f"budget {budget} exceeds the {len(pool)} unlabeled candidates")
    return [int(i) for i in rng.choice(pool, size=budget, replace=False)]


@dataclass
class DatasetPartition:
    """Target ids split into oracle-labeled, pseudo-labeled and unlabeled."""

    n: int
    oracle_labels: dict[int, int] = field(default_factory=dict)
    pseudo_labels: dict[int, int] = field(default_factory=dict)

    @property
    def labeled_ids(self) -> list[int]:
        return sorted(set(self.oracle_labels) | set(self.pseudo_labels))

    @property
    def unlabeled_ids(self) -> list[int]:
        taken = set(self.oracle_labels) | set(self.pseudo_labels)
        return [i for i in range(self.n) if i not in taken]


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    mmd_before: float | None
    mmd_after: float
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "selected": self.selected,
            "mmd_before": self.mmd_before,
            "mmd_after": self.mmd_after,
            "wall_time": self.wall_time,
        }


def run_round(partition: DatasetPartition, oracle, lrs: np.ndarray, budget: int, round_index: int,
              kernel: KernelSpec = KernelSpec(), strategy: str = "alrm",
              rng: np.random.Generator | None = None) -> RoundRecord:
    """Select ``budget`` unlabeled samples, query the oracle, and move them to the labeled pool."""
    start = time.perf_counter()
    unlabeled = partition.unlabeled_ids
    if budget > len(unlabeled):
        raise ValueError(f"round budget {budget} exceeds the {len(unlabeled)} remaining unlabeled samples")
    kernel = kernel.resolve(lrs)
    labeled = partition.labeled_ids
    before = mmd_squared(lrs, lrs[labeled], kernel) if labeled else None
    if strategy == "alrm":
        chosen = greedy_select(lrs, labeled, budget, kernel, candidates=unlabeled)
    elif strategy == "random":
        chosen = random_select(unlabeled, budget, rng)
    else:
        raise ValueError(f"unknown selection strategy {strategy!r}")
    for i in chosen:
        partition.oracle_labels[i] = oracle.label(i)
    after = mmd_squared(lrs, lrs[partition.labeled_ids], kernel)
    return RoundRecord(round_index, [int(i) for i in chosen], before, after, time.perf_counter() - start)
