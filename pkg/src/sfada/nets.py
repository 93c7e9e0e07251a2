"""Encoder, classifier and feature generator, plus the Adadelta optimizer.

Parameters are plain ``dict[str, np.ndarray]`` so the optimizer and the
checkpoint format can treat all three networks uniformly.  Batched inputs
are row-major: one sample per row.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .diffmath import Graph, Var

Params = dict[str, np.ndarray]


def _layer_sizes(d_in: int, hidden: Sequence[int], d_out: int) -> list[tuple[int, int]]:
    dims = [d_in, *hidden, d_out]
    return list(zip(dims[:-1], dims[1:]))


def _init_mlp(rng: np.random.Generator, sizes, prefix: str = "") -> Params:
    params: Params = {}
    for i, (fan_in, fan_out) in enumerate(sizes):
        params[f"{prefix}W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        params[f"{prefix}b{i}"] = np.zeros(fan_out)
    return params


def _n_layers(params: Mapping[str, np.ndarray]) -> int:
    return sum(1 for k in params if k.startswith("W"))


def _mlp(params, x: np.ndarray) -> np.ndarray:
    n = _n_layers(params)
    for i in range(n):
        x = x @ params[f"W{i}"] + params[f"b{i}"]
        if i < n - 1:
            x = np.tanh(x)
    return x


def _mlp_graph(g: Graph, pv: Mapping[str, Var], x: Var) -> Var:
    n = _n_layers(pv)
    for i in range(n):
        x = g.matmul(x, pv[f"W{i}"]) + pv[f"b{i}"]
        if i < n - 1:
            x = g.tanh(x)
    return x


def mlp_param_count(d_in: int, hidden: Sequence[int], d_out: int) -> int:
    return sum(a * b + b for a, b in _layer_sizes(d_in, hidden, d_out))


# encoder


def init_encoder(rng: np.random.Generator, d_in: int, hidden: Sequence[int], d_out: int) -> Params:
    return _init_mlp(rng, _layer_sizes(d_in, hidden, d_out))


def encode(params: Mapping[str, np.ndarray], x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d_in = params["W0"].shape[0]
    if x.shape[-1] != d_in:
        raise ValueError(f"encoder expects inputs of dimension {d_in}, got {x.shape[-1]}")
    return _mlp(params, x)


def encoder_graph(g: Graph, pv: Mapping[str, Var], x: Var) -> Var:
    return _mlp_graph(g, pv, x)


# classifier


def init_classifier(rng: np.random.Generator, d: int, n_classes: int) -> Params:
    return {
        "W": rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_classes, d)),
        "b": np.zeros(n_classes),
    }


def logits(params: Mapping[str, np.ndarray], h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    W = params["W"]
    if h.shape[-1] != W.shape[1]:
        raise ValueError(f"classifier expects features of dimension {W.shape[1]}, got {h.shape[-1]}")
    out = h @ W.T
    if "b" in params:
        out = out + params["b"]
    return out


def classify(params: Mapping[str, np.ndarray], h) -> np.ndarray:
    """Class probabilities softmax(W h + b)."""
    z = logits(params, h)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classifier_graph(g: Graph, pv: Mapping[str, Var], h: Var) -> Var:
    """Logits node; callers apply softmax or log-softmax."""
    out = g.matmul(h, g.transpose(pv["W"]))
    if "b" in pv:
        out = out + pv["b"]
    return out


# generator


def init_generator(
    rng: np.random.Generator, n_classes: int, d_noise: int, d_embed: int, hidden: Sequence[int], d_out: int
) -> Params:
    params = {"E": rng.normal(0.0, 1.0, size=(n_classes, d_embed))}
    params.update(_init_mlp(rng, _layer_sizes(d_noise + d_embed, hidden, d_out)))
    return params


def generate(params: Mapping[str, np.ndarray], noise, label) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    label = np.asarray(label)
    n_classes = params["E"].shape[0]
    if np.any(label < 0) or np.any(label >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    d_noise = params["W0"].shape[0] - params["E"].shape[1]
    if noise.shape[-1] != d_noise:
        raise ValueError(f"generator expects noise of dimension {d_noise}, got {noise.shape[-1]}")
    z = np.concatenate([noise, params["E"][label]], axis=-1)
    mlp = {k: v for k, v in params.items() if k != "E"}
    return _mlp(mlp, z)


def generator_graph(g: Graph, pv: Mapping[str, Var], noise: Var, onehot: np.ndarray) -> Var:
    emb = g.matmul(g.const(onehot), pv["E"])
    mlp = {k: v for k, v in pv.items() if k != "E"}
    return _mlp_graph(g, mlp, g.concat(noise, emb))


# graph inputs for parameters


def param_inputs(g: Graph, params: Mapping[str, np.ndarray], prefix: str, trainable: bool = True) -> dict[str, Var]:
    """Graph inputs named ``prefix + key``; frozen parameters become constants."""
    if trainable:
        return {k: g.input(prefix + k) for k in params}
    return {k: g.const(v) for k, v in params.items()}


def bind(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in params.items()}


def collect_grads(grads: Mapping[str, np.ndarray], prefix: str) -> Params:
    n = len(prefix)
    return {k[n:]: v for k, v in grads.items() if k.startswith(prefix)}


# freezing


def freeze(params: Mapping[str, np.ndarray]) -> Mapping[str, np.ndarray]:
    frozen = {}
    for k, v in params.items():
        arr = np.array(v, dtype=np.float64)
        arr.setflags(write=False)
        frozen[k] = arr
    return MappingProxyType(frozen)


def is_frozen(params) -> bool:
    return isinstance(params, MappingProxyType) and all(not v.flags.writeable for v in params.values())


def param_checksum(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


# Adadelta


@dataclass
class AdadeltaState:
    rho: float = 0.9
    eps: float = 1e-6
    lr: float = 0.1
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)
    acc_delta: dict[str, np.ndarray] = field(default_factory=dict)


def adadelta_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdadeltaState):
    """One Adadelta update; returns new ``(params, state)`` without mutating inputs."""
    new_params, sq, acc = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        s = state.square_avg.get(name, np.zeros_like(p))
        a = state.acc_delta.get(name, np.zeros_like(p))
        s = state.rho * s + (1.0 - state.rho) * g * g
        delta = np.sqrt(a + state.eps) / np.sqrt(s + state.eps) * g
        a = state.rho * a + (1.0 - state.rho) * delta * delta
        new_params[name] = p - state.lr * delta
        sq[name], acc[name] = s, a
    for name in state.square_avg:
        sq.setdefault(name, state.square_avg[name])
        acc.setdefault(name, state.acc_delta[name])
    return new_params, AdadeltaState(state.rho, state.eps, state.lr, sq, acc)


# checkpoints


def save_checkpoint(path, groups: Mapping[str, Mapping[str, np.ndarray]], meta: Mapping | None = None) -> None:
    """Write a JSON header line followed by one CSV block per tensor.

    Values are written with ``repr`` so the round trip is bit-exact.
    """
    header = {"format": "sfada-checkpoint", "version": 1, "meta": dict(meta or {}), "tensors": []}
    body = io.StringIO()
    for group in sorted(groups):
        for name in sorted(groups[group]):
            arr = np.asarray(groups[group][name], dtype=np.float64)
            header["tensors"].append({"group": group, "name": name, "shape": list(arr.shape)})
            body.write(f"# {group}/{name}\n")
            rows = arr.reshape(arr.shape[0], -1) if arr.ndim >= 1 else arr.reshape(1, 1)
            for row in rows:
                body.write(",".join(repr(float(v)) for v in row) + "\n")
    Path(path).write_text(json.dumps(header, sort_keys=True) + "\n" + body.getvalue())


def load_checkpoint(path) -> tuple[dict[str, Params], dict]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "sfada-checkpoint":
        raise ValueError(f"{path}: not a checkpoint file")
    groups: dict[str, Params] = {}
    pos = 1
    for t in header["tensors"]:
        tag = lines[pos]
        if tag != f"# {t['group']}/{t['name']}":
            raise ValueError(f"{path}: expected block for {t['group']}/{t['name']}, found {tag!r}")
        pos += 1
        shape = tuple(t["shape"])
        n_rows = shape[0] if shape else 1
        if n_rows == 0:
            values = []
        else:
            values = [float(v) for line in lines[pos : pos + n_rows] for v in line.split(",") if v]
        pos += n_rows
        groups.setdefault(t["group"], {})[t["name"]] = np.array(values, dtype=np.float64).reshape(shape)
    return groups, header["meta"]
