"""Small reverse-mode differentiation engine.

Graphs are built symbolically, node by node, and evaluated in node order.
Only the primitives the training losses need are provided; tensors are
plain float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

Tensor = np.ndarray


class GraphError(ValueError):
    """Raised when a node cannot be evaluated; carries the offending node id."""

    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


@dataclass(frozen=True, eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class Var:
    """Handle to a graph node with arithmetic sugar."""

    graph: "Graph"
    id: int

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __rmul__(self, other):
        return self.graph.mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a graph node is not supported")
        return self.graph.mul(self, 1.0 / float(other))

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)


class Graph:
    """An append-only list of primitive applications.

    Node order is the evaluation order, so the graph is acyclic by
    construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.differentiable: set[str] = set()

    def _push(self, op: str, inputs: tuple[int, ...] = (), **attrs) -> Var:
        node = Node(len(self.nodes), op, inputs, attrs)
        self.nodes.append(node)
        return Var(self, node.id)

    def _ref(self, x) -> int:
        if isinstance(x, Var):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x.id
        return self.const(x).id

    # leaves

    def input(self, name: str, differentiable: bool = True) -> Var:
        if name in self.inputs:
            raise ValueError(f"duplicate input name {name!r}")
        var = self._push("input", name=name)
        self.inputs[name] = var.id
        if differentiable:
            self.differentiable.add(name)
        return var

    def const(self, value) -> Var:
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        return self._push("const", value=arr)

    # primitives

    def matmul(self, a, b) -> Var:
        return self._push("matmul", (self._ref(a), self._ref(b)))

    def add(self, a, b) -> Var:
        return self._push("add", (self._ref(a), self._ref(b)))

    def sub(self, a, b) -> Var:
        return self._push("sub", (self._ref(a), self._ref(b)))

    def mul(self, a, b) -> Var:
        return self._push("mul", (self._ref(a), self._ref(b)))

    def neg(self, a) -> Var:
        return self._push("neg", (self._ref(a),))

    def exp(self, a) -> Var:
        return self._push("exp", (self._ref(a),))

    def log(self, a) -> Var:
        return self._push("log", (self._ref(a),))

    def tanh(self, a) -> Var:
        return self._push("tanh", (self._ref(a),))

    def sum(self, a, axis: int | None = None) -> Var:
        return self._push("sum", (self._ref(a),), axis=axis)

    def mean(self, a, axis: int | None = None) -> Var:
        return self._push("mean", (self._ref(a),), axis=axis)

    def softmax(self, a) -> Var:
        return self._push("softmax", (self._ref(a),))

    def log_softmax(self, a) -> Var:
        return self._push("log_softmax", (self._ref(a),))

    def logsumexp(self, a, mask=None) -> Var:
        """Log-sum-exp over the last axis, restricted to ``mask`` entries."""
        m = None
        if mask is not None:
            m = np.asarray(mask, dtype=bool)
            if not m.any(axis=-1).all():
                raise ValueError("every row of the mask needs at least one entry")
        return self._push("logsumexp", (self._ref(a),), mask=m)

    def cosine(self, a, b) -> Var:
        """Pairwise cosine similarity of the rows of ``a`` and ``b``."""
        return self._push("cosine", (self._ref(a), self._ref(b)))

    def trace(self, a) -> Var:
        return self._push("trace", (self._ref(a),))

    def outer(self, a, b) -> Var:
        return self._push("outer", (self._ref(a), self._ref(b)))

    def l1_distance(self, a, b) -> Var:
        """Sum of absolute differences over the last axis."""
        return self._push("l1", (self._ref(a), self._ref(b)))

    def transpose(self, a) -> Var:
        return self._push("transpose", (self._ref(a),))

    def concat(self, a, b) -> Var:
        """Concatenate along the last axis."""
        return self._push("concat", (self._ref(a), self._ref(b)))


# forward rules


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _masked_lse(x: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    if mask is None:
        mx = x.max(axis=-1, keepdims=True)
        e = np.exp(x - mx)
    else:
        mask = np.broadcast_to(mask, x.shape)
        mx = np.where(mask, x, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, x - mx, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return (mx + np.log(s))[..., 0], e / s


def _rows(a: np.ndarray) -> np.ndarray:
    return a[None, :] if a.ndim == 1 else a


def _norms(a: np.ndarray, node_id: int) -> np.ndarray:
    n = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    if np.any(n == 0.0):
        raise GraphError(node_id, "cosine similarity of a zero-norm vector")
    return n


def _cosine(a: np.ndarray, b: np.ndarray, node_id: int) -> np.ndarray:
    a2, b2 = _rows(a), _rows(b)
    if a2.shape[-1] != b2.shape[-1]:
        raise GraphError(node_id, f"cosine dims {a.shape} vs {b.shape}")
    s = (a2 / _norms(a2, node_id)) @ (b2 / _norms(b2, node_id)).T
    if a.ndim == 1 and b.ndim == 1:
        return s[0, 0]
    if a.ndim == 1:
        return s[0]
    if b.ndim == 1:
        return s[:, 0]
    return s


def _forward(node: Node, args: list[np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "matmul":
        a, b = args
        if a.ndim == 0 or b.ndim == 0:
            raise GraphError(node.id, "matmul of a scalar")
        if a.shape[-1] != b.shape[0]:
            raise GraphError(node.id, f"matmul shapes {a.shape} and {b.shape}")
        return a @ b
    if op in ("add", "sub", "mul"):
        a, b = args
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise GraphError(node.id, f"{op} shapes {a.shape} and {b.shape}") from None
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        return a * b
    if op == "neg":
        return -args[0]
    if op == "exp":
        with np.errstate(over="ignore"):
            return np.exp(args[0])
    if op == "log":
        if np.any(args[0] <= 0):
            raise GraphError(node.id, "log of a non-positive value")
        return np.log(args[0])
    if op == "tanh":
        return np.tanh(args[0])
    if op == "sum":
        return np.sum(args[0], axis=node.attrs["axis"])
    if op == "mean":
        return np.mean(args[0], axis=node.attrs["axis"])
    if op == "softmax":
        return _softmax(args[0])
    if op == "log_softmax":
        return _log_softmax(args[0])
    if op == "logsumexp":
        mask = node.attrs["mask"]
        if mask is not None:
            try:
                np.broadcast_shapes(mask.shape, args[0].shape)
            except ValueError:
                raise GraphError(node.id, "mask shape mismatch") from None
        return _masked_lse(args[0], mask)[0]
    if op == "cosine":
        return _cosine(args[0], args[1], node.id)
    if op == "trace":
        a = args[0]
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(node.id, f"trace of shape {a.shape}")
        return np.array(np.trace(a))
    if op == "outer":
        a, b = args
        if a.ndim != 1 or b.ndim != 1:
            raise GraphError(node.id, "outer product needs two vectors")
        return np.outer(a, b)
    if op == "l1":
        a, b = args
        if a.shape != b.shape:
            raise GraphError(node.id, f"l1 shapes {a.shape} and {b.shape}")
        return np.abs(a - b).sum(axis=-1)
    if op == "transpose":
        if args[0].ndim != 2:
            raise GraphError(node.id, f"transpose of shape {args[0].shape}")
        return args[0].T
    if op == "concat":
        a, b = args
        if a.shape[:-1] != b.shape[:-1]:
            raise GraphError(node.id, f"concat shapes {a.shape} and {b.shape}")
        return np.concatenate([a, b], axis=-1)
    raise GraphError(node.id, f"unknown primitive {op!r}")


def evaluate(graph: Graph, bindings: Mapping[str, Any]) -> dict[int, np.ndarray]:
    """Forward values of every node, keyed by node id."""
    values: dict[int, np.ndarray] = {}
    for node in graph.nodes:
        if node.op == "input":
            name = node.attrs["name"]
            if name not in bindings:
                raise GraphError(node.id, f"unbound input {name!r}")
            out = np.asarray(bindings[name], dtype=np.float64)
        elif node.op == "const":
            out = node.attrs["value"]
        else:
            out = np.asarray(_forward(node, [values[i] for i in node.inputs]))
        if not np.all(np.isfinite(out)):
            raise GraphError(node.id, f"non-finite value from {node.op}")
        values[node.id] = out
    return values


# reverse rules


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _expand(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _cosine_vjp(a, b, g):
    a2, b2 = _rows(a), _rows(b)
    g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[0])
    na, nb = np.sqrt((a2 * a2).sum(-1, keepdims=True)), np.sqrt((b2 * b2).sum(-1, keepdims=True))
    an, bn = a2 / na, b2 / nb
    g_an = g2 @ bn
    g_bn = g2.T @ an
    ga = (g_an - an * (g_an * an).sum(-1, keepdims=True)) / na
    gb = (g_bn - bn * (g_bn * bn).sum(-1, keepdims=True)) / nb
    return ga.reshape(a.shape), gb.reshape(b.shape)


def _backward(node: Node, args: list[np.ndarray], out: np.ndarray, g: np.ndarray):
    op = node.op
    if op == "matmul":
        a, b = args
        if a.ndim == 1 and b.ndim == 1:
            return g * b, g * a
        if b.ndim == 1:
            return np.outer(g, b), a.T @ g
        if a.ndim == 1:
            return b @ g, np.outer(a, g)
        return g @ b.T, a.T @ g
    if op == "add":
        return _unbroadcast(g, args[0].shape), _unbroadcast(g, args[1].shape)
    if op == "sub":
        return _unbroadcast(g, args[0].shape), _unbroadcast(-g, args[1].shape)
    if op == "mul":
        a, b = args
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    if op == "neg":
        return (-g,)
    if op == "exp":
        return (g * out,)
    if op == "log":
        return (g / args[0],)
    if op == "tanh":
        return (g * (1.0 - out * out),)
    if op == "sum":
        return (_expand(g, args[0].shape, node.attrs["axis"]).copy(),)
    if op == "mean":
        axis = node.attrs["axis"]
        count = args[0].size if axis is None else args[0].shape[axis]
        return (_expand(g, args[0].shape, axis) / count,)
    if op == "softmax":
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    if op == "log_softmax":
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)
    if op == "logsumexp":
        _, weights = _masked_lse(args[0], node.attrs["mask"])
        return (np.expand_dims(g, -1) * weights,)
    if op == "cosine":
        return _cosine_vjp(args[0], args[1], g)
    if op == "trace":
        return (g * np.eye(args[0].shape[0]),)
    if op == "outer":
        a, b = args
        return g @ b, g.T @ a
    if op == "l1":
        a, b = args
        ga = np.expand_dims(g, -1) * np.sign(a - b)
        return ga, -ga
    if op == "transpose":
        return (g.T,)
    if op == "concat":
        k = args[0].shape[-1]
        return g[..., :k], g[..., k:]
    raise GraphError(node.id, f"no gradient rule for {op!r}")


def backward(graph: Graph, values: Mapping[int, np.ndarray], output: Var | int) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar node given precomputed forward values."""
    out_id = output.id if isinstance(output, Var) else output
    if values[out_id].size != 1 or values[out_id].ndim > 1:
        raise GraphError(out_id, f"gradient needs a scalar output, got shape {values[out_id].shape}")
    # Only nodes on a path from a differentiable input need adjoints.
    live = [False] * len(graph.nodes)
    for node in graph.nodes[: out_id + 1]:
        if node.op == "input":
            live[node.id] = node.attrs["name"] in graph.differentiable
        elif node.op != "const":
            live[node.id] = any(live[i] for i in node.inputs)
    adj: dict[int, np.ndarray] = {out_id: np.ones_like(values[out_id])}
    for node in reversed(graph.nodes[: out_id + 1]):
        if node.op in ("input", "const"):
            continue
        g = adj.pop(node.id, None)
        if g is None:
            continue
        grads = _backward(node, [values[i] for i in node.inputs], values[node.id], g)
        for i, gi in zip(node.inputs, grads):
            if not live[i]:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(values[i].shape)
            adj[i] = adj[i] + gi if i in adj else gi
    result = {}
    for name in sorted(graph.differentiable):
        nid = graph.inputs[name]
        result[name] = adj.get(nid, np.zeros_like(values[nid]))
    return result


def gradient(graph: Graph, bindings: Mapping[str, Any], scalar_output: Var | int) -> dict[str, np.ndarray]:
    """Exact gradient of a scalar node with respect to each differentiable input."""
    return backward(graph, evaluate(graph, bindings), scalar_output)


def value_and_gradient(graph: Graph, bindings, scalar_output: Var | int) -> tuple[float, dict[str, np.ndarray]]:
    values = evaluate(graph, bindings)
    out_id = scalar_output.id if isinstance(scalar_output, Var) else scalar_output
    return float(values[out_id]), backward(graph, values, out_id)


def finite_difference_check(graph: Graph, bindings, scalar_output: Var | int, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    out_id = scalar_output.id if isinstance(scalar_output, Var) else scalar_output
    analytic = gradient(graph, bindings, out_id)
    base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}

    def f(b) -> float:
        return float(evaluate(graph, b)[out_id])

    worst = 0.0
    for name, grad in analytic.items():
        x = base[name]
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(base)
            flat[i] = orig - step
            lo = f(base)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = grad.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), 1e-8))
    return worst

