"""Seeded comparison grid: component ablations, random selection and threshold-only pseudo-labelling."""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import harness

log = logging.getLogger(__name__)

_OFF = ["alg=0", "inter=0", "intra=0", "spmis=0"]

# label -> (--ablate items, strategy)
VARIANTS = {
    "ce": (_OFF, "alrm"),
    "ce+alg": (_OFF + ["alg=1"], "alrm"),
    "ce+alg+inter": (_OFF + ["alg=1", "inter=1"], "alrm"),
    "ce+alg+intra": (_OFF + ["alg=1", "intra=1"], "alrm"),
    "ce+alg+inter+intra": (_OFF + ["alg=1", "inter=1", "intra=1"], "alrm"),
    "full": ([], "alrm"),
    "full/random": ([], "random"),
    "full/threshold-only": (["mis_pl=0", "rev_pl=0"], "alrm"),
}
# component-addition path whose mean accuracy should not drop
LADDER = ("ce", "ce+alg", "ce+alg+inter+intra", "full")


def variant_config(base: C.RunConfig, label: str, seed: int) -> C.RunConfig:
    ablate, strategy = VARIANTS[label]
    cfg = C.apply_overrides(base, seed=seed, ablate=ablate, label=label)
    if strategy != cfg.active.strategy:
        data = cfg.to_dict()
        data["active"]["strategy"] = strategy
        cfg = C.from_dict(data)
    return cfg


def matched_precision(a: list, b: list, truth: np.ndarray) -> tuple[float, float, int] | None:
    """Precision of two accepted-label lists truncated to a common count, earliest acceptances first."""
    n = min(len(a), len(b))
    if n == 0:
        return None
    prec = [float(np.mean([truth[i] == y for i, y in lst[:n]])) for lst in (a, b)]
    return prec[0], prec[1], n


def run_grid(base: C.RunConfig, seeds, out, cache=None, labels=None) -> dict:
    out = Path(out)
    labels = list(labels or VARIANTS)
    t0 = time.perf_counter()
    reports = []
    for seed in seeds:
        for label in labels:
            cfg = variant_config(base, label, seed)
            run_dir = out / f"{label.replace('/', '_')}" / f"seed{seed}"
            report = harness.run_all(cfg, run_dir, cache_dir=cache, dump_features=False)
            reports.append(report)
            log.info("%s seed %d accuracy %.4f", label, seed, report["final"]["accuracy"])
    rows = harness.compare(reports)
    harness.write_comparison(rows, out)
    summary = {
        "seeds": list(seeds),
        "wall_seconds": time.perf_counter() - t0,
        "accuracy": {r["label"]: r["accuracy_mean"] for r in rows},
        "pseudo_precision": {},
    }
    for label in labels:
        vals = [r["pseudo"]["precision"] for r in reports if r["label"] == label and r["pseudo"]["precision"] is not None]
        if vals:
            summary["pseudo_precision"][label] = float(np.mean(vals))
    if {"full", "full/threshold-only"} <= set(labels):
        matched = []
        for seed in seeds:
            full, thr = (next(r for r in reports if r["seed"] == seed and r["label"] == lab)
                         for lab in ("full", "full/threshold-only"))
            _, target = harness.make_data(variant_config(base, "full", seed))
            m = matched_precision(full["pseudo"]["accepted_order"], thr["pseudo"]["accepted_order"],
                                  target.evaluation_labels())
            if m is not None:
                matched.append({"seed": seed, "full": m[0], "threshold_only": m[1], "count": m[2]})
        summary["matched_precision"] = matched
    harness.write_json(out / "grid_summary.json", summary)
    return {"rows": rows, "reports": reports, "summary": summary}
