"""Experiment orchestration: stages, artifacts, run reports and report comparison."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nets
from .config import RunConfig, _digest
from .lpda import AdaptResult, adapt
from .metrics import all_metrics, roc_auc, write_roc_csv
from .source import (
    SourceModel,
    class_similarity_matrix,
    export_features,
    pretrain_source,
    sample_generated,
    train_generator,
)
from .synthdata import LabeledDataset, TargetDomain, make_source, make_target

log = logging.getLogger(__name__)

REPORT_SCHEMA = "sfada-report/1"
ADAPT_STREAMS = ("augment", "mixup", "prototype", "select", "loader", "spmis")
METRIC_COLUMNS = ("epoch", "loss", "accuracy", "macro_f1", "auc", "kappa", "qwk", "n_oracle", "n_pseudo",
                  "pseudo_added", "pseudo_revoked", "pseudo_precision")


class RunFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Stage1:
    model: SourceModel
    generator: nets.Params
    generator_trace: list[float]


# data and stages


def make_data(cfg: RunConfig) -> tuple[LabeledDataset, TargetDomain]:
    source = make_source(cfg.source_data, cfg.stream_seed("data.source"))
    target = make_target(cfg.target_data, cfg.source_data, cfg.stream_seed("data.target"))
    return source, target


def run_pretrain(cfg: RunConfig, source: LabeledDataset) -> SourceModel:
    return pretrain_source(source, cfg.source, cfg.stream("train.source"), cfg.stream("init.source"))


def run_generator(cfg: RunConfig, classifier) -> tuple[nets.Params, list[float]]:
    res = train_generator(nets.freeze(classifier), cfg.source, cfg.stream("train.generator"),
                          cfg.stream("init.generator"))
    return res.generator, res.loss_trace


def run_adapt(cfg: RunConfig, stage1: Stage1, target: TargetDomain, audit: bool = False) -> AdaptResult:
    rngs = {name: cfg.stream(name) for name in ADAPT_STREAMS}
    return adapt(stage1.model.encoder, stage1.model.classifier, stage1.generator, target, cfg.lpda, cfg.active,
                 rngs, audit=audit)


def _meta(cfg: RunConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, "stage1_hash": cfg.stage1_hash(), **extra}


def save_stage1(path, cfg: RunConfig, stage1: Stage1) -> None:
    m = stage1.model
    nets.save_checkpoint(path, {"encoder": m.encoder, "classifier": m.classifier, "generator": stage1.generator},
                         _meta(cfg, train_accuracy=m.train_accuracy, loss_trace=m.loss_trace,
                               generator_trace=stage1.generator_trace))


def load_stage1(path, cfg: RunConfig) -> Stage1:
    groups, meta = nets.load_checkpoint(path)
    if meta.get("stage1_hash") != cfg.stage1_hash():
        raise ValueError(f"{path}: produced by a different seed or source configuration")
    model = SourceModel(groups["encoder"], groups["classifier"], meta["loss_trace"], meta["train_accuracy"])
    return Stage1(model, groups.get("generator", {}), meta.get("generator_trace", []))


def stage1_cached(cfg: RunConfig, source: LabeledDataset, cache_dir=None) -> tuple[Stage1, bool]:
    """Stage-one artifacts, reused from ``cache_dir`` when an entry for this seed and config exists."""
    path = Path(cache_dir) / f"stage1_{cfg.stage1_hash()}.ckpt" if cache_dir else None
    if path is not None and path.exists():
        return load_stage1(path, cfg), True
    model = run_pretrain(cfg, source)
    gen, trace = run_generator(cfg, model.classifier)
    stage1 = Stage1(model, gen, trace)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_stage1(path, cfg, stage1)
    return stage1, False


# reports


def default_label(cfg: RunConfig) -> str:
    if cfg.label:
        return cfg.label
    c = cfg.lpda
    parts = [name for name, on in (("alg", c.use_alg), ("inter", c.use_inter), ("intra", c.use_intra),
                                   ("mixup", c.use_mixup), ("add", c.add_pl), ("mis", c.add_pl and c.mis_pl),
                                   ("rev", c.add_pl and c.rev_pl)) if on]
    return f"{cfg.active.strategy}:" + ("+".join(parts) or "ce")


def stage1_summary(cfg: RunConfig, stage1: Stage1, source: LabeledDataset) -> dict:
    K = source.n_classes
    feats, labels = sample_generated(stage1.generator, 100, K, cfg.stream("eval.generator"))
    gen_acc = float((nets.classify(stage1.model.classifier, feats).argmax(1) == labels).mean())
    H = nets.encode(stage1.model.encoder, source.X)
    return {
        "train_accuracy": stage1.model.train_accuracy,
        "final_loss": stage1.model.loss_trace[-1] if stage1.model.loss_trace else None,
        "generator_accuracy": gen_acc,
        "class_similarity": class_similarity_matrix(H, source.y, K).tolist(),
    }


def build_report(cfg: RunConfig, summary: dict, result: AdaptResult, target: TargetDomain,
                 timestamps: dict) -> dict:
    truth = target.evaluation_labels()
    final = all_metrics(result.final_probs, truth, target.n_classes)
    pseudo = result.partition.pseudo_labels
    first: dict[int, int] = {}
    for e in result.pseudo_events:
        if e["event"] == "add":
            first.setdefault(e["id"], len(first))
    accepted = sorted(pseudo.items(), key=lambda kv: first.get(kv[0], len(first)))
    budget = int(np.floor(cfg.active.budget_fraction * len(target)))
    report = {
        "schema": REPORT_SCHEMA,
        "label": default_label(cfg),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "dataset_hash": cfg.dataset_hash(),
        "target_digest": target.digest(),
        "n_classes": target.n_classes,
        "config": cfg.to_dict(),
        "source": summary,
        "budget": budget,
        "oracle_calls": target.oracle.calls,
        "epochs": result.epochs,
        "final": final,
        "selection": [
            {k: v for k, v in r.to_dict().items() if k != "wall_time"} for r in result.selection
        ],
        "pseudo": {
            "accepted": len(pseudo),
            "precision": float(np.mean([truth[i] == y for i, y in pseudo.items()])) if pseudo else None,
            "events": len(result.pseudo_events),
            "adds": sum(e["event"] == "add" for e in result.pseudo_events),
            "revisions": sum(e["event"] == "revise" for e in result.pseudo_events),
            "accepted_order": [[int(i), int(y)] for i, y in accepted],
        },
        "audit": result.audit,
        "timestamps": dict(timestamps, round_wall_times=[r.wall_time for r in result.selection]),
    }
    report["report_hash"] = report_hash(report)
    return report


def report_hash(report: dict) -> str:
    return _digest({k: v for k, v in report.items() if k not in ("timestamps", "report_hash")})


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


# artifact writers


def _header(cfg: RunConfig) -> str:
    return f"# config_hash={cfg.hash()} seed={cfg.seed}\n"


def write_metrics_csv(path, cfg: RunConfig, epochs: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header(cfg))
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for rec in epochs:
            w.writerow(["" if rec.get(c) is None else rec.get(c) for c in METRIC_COLUMNS])


def write_jsonl(path, cfg: RunConfig, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({"config_hash": cfg.hash(), "seed": cfg.seed, **rec}, sort_keys=True) + "\n")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_failure(out: Path, cfg: RunConfig, failure: RunFailure) -> Path:
    path = out / "failure.json"
    write_json(path, {"config_hash": cfg.hash(), "seed": cfg.seed, "stage": failure.stage,
                      "error": type(failure.cause).__name__, "message": str(failure.cause), "time": _now()})
    return path


def write_adapt_artifacts(out: Path, cfg: RunConfig, report: dict, result: AdaptResult, target: TargetDomain,
                          dump_features: bool = True) -> None:
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed}
    write_json(out / "report.json", report)
    write_metrics_csv(out / "metrics.csv", cfg, result.epochs)
    write_jsonl(out / "selection.jsonl", cfg, [r.to_dict() for r in result.selection])
    write_jsonl(out / "pseudo_events.jsonl", cfg, result.pseudo_events)
    write_roc_csv(roc_auc(result.final_probs, target.evaluation_labels()), out, meta)
    nets.save_checkpoint(out / "adapted.ckpt", {"encoder": result.encoder, "classifier": result.classifier},
                         _meta(cfg))
    if dump_features:
        H = nets.encode(result.encoder, target.X)
        export_features(H, result.final_probs.argmax(1), out / "features_target.csv", "target-adapted", meta)


def _staged(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # recorded in failure.json by the caller
        raise RunFailure(stage, exc) from exc


def run_all(cfg: RunConfig, out, cache_dir=None, audit: bool = True, dump_features: bool = True) -> dict:
    """Stage one, alternating selection and adaptation, evaluation; every artifact lands in ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    durations = {}
    try:
        t = time.perf_counter()
        source, target = _staged("data", make_data, cfg)
        stage1, cached = _staged("source", stage1_cached, cfg, source, cache_dir)
        durations["stage1"] = time.perf_counter() - t
        summary = stage1_summary(cfg, stage1, source)
        t = time.perf_counter()
        result = _staged("adapt", run_adapt, cfg, stage1, target, audit)
        durations["adapt"] = time.perf_counter() - t
        stamps = {"started": started, "finished": _now(), "durations": durations, "stage1_cached": cached}
        report = build_report(cfg, summary, result, target, stamps)
        _staged("write", write_adapt_artifacts, out, cfg, report, result, target, dump_features)
        return report
    except RunFailure as failure:
        write_failure(out, cfg, failure)
        raise


# stage-by-stage entry points used by the CLI


def pretrain_to(cfg: RunConfig, out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    source, _ = make_data(cfg)
    model = run_pretrain(cfg, source)
    path = out / "source.ckpt"
    nets.save_checkpoint(path, {"encoder": model.encoder, "classifier": model.classifier},
                         _meta(cfg, train_accuracy=model.train_accuracy, loss_trace=model.loss_trace))
    return path


def generator_to(cfg: RunConfig, out) -> Path:
    out = Path(out)
    groups, meta = nets.load_checkpoint(out / "source.ckpt")
    if meta.get("stage1_hash") != cfg.stage1_hash():
        raise ValueError(f"{out / 'source.ckpt'}: produced by a different seed or source configuration")
    gen, trace = run_generator(cfg, groups["classifier"])
    model = SourceModel(groups["encoder"], groups["classifier"], meta["loss_trace"], meta["train_accuracy"])
    path = out / "stage1.ckpt"
    save_stage1(path, cfg, Stage1(model, gen, trace))
    return path


def adapt_from(cfg: RunConfig, out, audit: bool = True) -> dict:
    out = Path(out)
    started = _now()
    source, target = make_data(cfg)
    stage1 = load_stage1(out / "stage1.ckpt", cfg)
    summary = stage1_summary(cfg, stage1, source)
    t = time.perf_counter()
    try:
        result = _staged("adapt", run_adapt, cfg, stage1, target, audit)
    except RunFailure as failure:
        write_failure(out, cfg, failure)
        raise
    stamps = {"started": started, "finished": _now(), "durations": {"adapt": time.perf_counter() - t}}
    report = build_report(cfg, summary, result, target, stamps)
    write_adapt_artifacts(out, cfg, report, result, target)
    return report


def evaluate_from(cfg: RunConfig, out) -> dict:
    out = Path(out)
    groups, meta = nets.load_checkpoint(out / "adapted.ckpt")
    if meta.get("config_hash") != cfg.hash():
        raise ValueError(f"{out / 'adapted.ckpt'}: produced by a different configuration")
    _, target = make_data(cfg)
    probs = nets.classify(groups["classifier"], nets.encode(groups["encoder"], target.X))
    metrics = all_metrics(probs, target.evaluation_labels(), target.n_classes)
    result = {"config_hash": cfg.hash(), "seed": cfg.seed, "dataset_hash": cfg.dataset_hash(), **metrics}
    write_json(out / "evaluation.json", result)
    write_roc_csv(roc_auc(probs, target.evaluation_labels()), out, {"config_hash": cfg.hash(), "seed": cfg.seed})
    return result


def export_from(cfg: RunConfig, out, what: str, n_per_class: int = 100) -> Path:
    """Feature dump of the source data, target data or generator under the stage-one model."""
    out = Path(out)
    stage1 = load_stage1(out / "stage1.ckpt", cfg)
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed}
    source, target = make_data(cfg)
    if what == "source":
        feats, labels = nets.encode(stage1.model.encoder, source.X), source.y
    elif what == "target":
        H = nets.encode(stage1.model.encoder, target.X)
        feats, labels = H, nets.classify(stage1.model.classifier, H).argmax(1)
    elif what == "generator":
        feats, labels = sample_generated(stage1.generator, n_per_class, source.n_classes, cfg.stream("export"))
    else:
        raise ValueError(f"unknown feature source {what!r}")
    return export_features(feats, labels, out / f"features_{what}.csv", what, meta)


# comparison

COMPARE_METRICS = ("accuracy", "macro_f1", "qwk", "kappa", "auc")


def compare(reports: list[dict]) -> list[dict]:
    """Per-label mean and sd over seeds, with deltas against the first label."""
    if not reports:
        raise ValueError("no reports to compare")
    ks = {r["n_classes"] for r in reports}
    if len(ks) > 1:
        raise ValueError(f"reports disagree on the number of classes: {sorted(ks)}")
    by_seed: dict[int, str] = {}
    for r in reports:
        prev = by_seed.setdefault(r["seed"], r["dataset_hash"])
        if prev != r["dataset_hash"]:
            raise ValueError(f"mismatched dataset hashes for seed {r['seed']}: {prev} vs {r['dataset_hash']}")
    groups: dict[str, list[dict]] = {}
    for r in reports:
        groups.setdefault(r["label"], []).append(r)
    rows = []
    for label, rs in groups.items():
        row = {"label": label, "n": len(rs), "seeds": sorted({r["seed"] for r in rs})}
        for m in COMPARE_METRICS:
            vals = [r["final"][m] for r in rs if r["final"][m] is not None]
            row[f"{m}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{m}_sd"] = float(np.std(vals)) if vals else None
        rows.append(row)
    base = rows[0]
    for row in rows:
        for m in COMPARE_METRICS:
            a, b = row[f"{m}_mean"], base[f"{m}_mean"]
            row[f"{m}_delta"] = None if a is None or b is None else a - b
    return rows


def write_comparison(rows: list[dict], out) -> tuple[Path, str]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["label", "n", "seeds"] + [f"{m}_{s}" for m in COMPARE_METRICS for s in ("mean", "sd", "delta")]
    path = out / "comparison.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([" ".join(map(str, row[c])) if c == "seeds" else row[c] for c in cols])
    text = format_comparison(rows)
    (out / "comparison.txt").write_text(text)
    return path, text


def format_comparison(rows: list[dict]) -> str:
    def cell(row, m):
        mean, sd, delta = row[f"{m}_mean"], row[f"{m}_sd"], row[f"{m}_delta"]
        if mean is None:
            return "n/a".rjust(22)
        return f"{100 * mean:6.2f}±{100 * sd:4.2f} ({100 * delta:+5.2f})"

    width = max(len(r["label"]) for r in rows)
    head = "label".ljust(width) + " seeds " + "".join(m.rjust(23) for m in COMPARE_METRICS)
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(r["label"].ljust(width) + f" {r['n']:5d} " + "".join(" " + cell(r, m) for m in COMPARE_METRICS))
    return "\n".join(lines) + "\n"
