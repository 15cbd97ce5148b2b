"""Reverse-mode differentiation over a fixed dense-matrix op vocabulary.

Everything is a 2-D float64 array (scalars are 1x1).  A `Tape` records the
forward computation; `Tape.gradients(loss)` replays it backwards and
returns one gradient per registered parameter, with zeros for parameters
the loss never touched.  The vocabulary is deliberately closed: each op
carries a hand-derived backward rule, and the test suite checks every one
of them against central finite differences.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, InputError, NonFiniteError, UsageError

Array = np.ndarray


def as_matrix(x, name: str = "matrix") -> Array:
    """Coerce to a 2-D float64 C-order array; 1-D inputs become one row."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return np.ascontiguousarray(a)


def _check_finite(value: Array) -> Array:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("operation produced a non-finite value")
    return value


def _unbroadcast(grad: Array, shape: tuple[int, int]) -> Array:
    """Reduce a gradient back to `shape` by summing broadcast axes."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _broadcastable(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


class Node:
    """One recorded value in the computation graph."""

    __slots__ = ("value", "backward_fn", "param_name")

    def __init__(self, value: Array, backward_fn=None, param_name: str | None = None):
        self.value = value
        self.backward_fn = backward_fn
        self.param_name = param_name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise UsageError(f"item() requires a scalar node, got shape {self.value.shape}")
        return float(self.value[0, 0])


class Tape:
    """Single-writer record of ops; owns parameters and their gradients."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._params: dict[str, Node] = {}

    # -- graph construction -------------------------------------------------

    def param(self, name: str, value) -> Node:
        if name in self._params:
            raise UsageError(f"parameter {name!r} registered twice")
        node = self._record(as_matrix(value, name), None, param_name=name)
        self._params[name] = node
        return node

    def constant(self, value) -> Node:
        return self._record(as_matrix(value), None)

    def _record(self, value: Array, backward_fn, param_name: str | None = None) -> Node:
        node = Node(_check_finite(value), backward_fn, param_name)
        self._nodes.append(node)
        return node

    # -- backward pass ------------------------------------------------------

    def gradients(self, loss: Node) -> dict[str, Array]:
        """Gradient of the scalar `loss` w.r.t. every registered parameter."""
        if loss.shape != (1, 1):
            raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, Array] = {id(loss): np.ones((1, 1))}
        for node in reversed(self._nodes):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, contrib in node.backward_fn(g):
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else prev + contrib
        return {
            name: grads.get(id(p), np.zeros_like(p.value))
            for name, p in self._params.items()
        }

    # -- elementwise arithmetic ----------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        if not _broadcastable(a.shape, b.shape):
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
        def backward(g):
            return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]
        return self._record(a.value + b.value, backward)

    def sub(self, a: Node, b: Node) -> Node:
        if not _broadcastable(a.shape, b.shape):
            raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")
        def backward(g):
            return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]
        return self._record(a.value - b.value, backward)

    def mul(self, a: Node, b: Node) -> Node:
        if not _broadcastable(a.shape, b.shape):
            raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
        def backward(g):
            return [
                (a, _unbroadcast(g * b.value, a.shape)),
                (b, _unbroadcast(g * a.value, b.shape)),
            ]
        return self._record(a.value * b.value, backward)

    def div(self, a: Node, b: Node) -> Node:
        if not _broadcastable(a.shape, b.shape):
            raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast")
        def backward(g):
            return [
                (a, _unbroadcast(g / b.value, a.shape)),
                (b, _unbroadcast(-g * a.value / (b.value * b.value), b.shape)),
            ]
        return self._record(a.value / b.value, backward)

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        def backward(g):
            return [(a, g * c)]
        return self._record(a.value * c, backward)

    # -- linear algebra -------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(
                f"matmul: inner dimensions differ, {a.shape} x {b.shape}"
            )
        def backward(g):
            return [(a, g @ b.value.T), (b, a.value.T @ g)]
        return self._record(a.value @ b.value, backward)

    def transpose(self, a: Node) -> Node:
        def backward(g):
            return [(a, np.ascontiguousarray(g.T))]
        return self._record(np.ascontiguousarray(a.value.T), backward)

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        """x @ w.T + b, with w (out x in) and b (1 x out)."""
        if x.shape[1] != w.shape[1]:
            raise DimensionError(f"affine: input {x.shape} does not match weight {w.shape}")
        if b.shape != (1, w.shape[0]):
            raise DimensionError(f"affine: bias {b.shape} does not match weight {w.shape}")
        def backward(g):
            return [
                (x, g @ w.value),
                (w, g.T @ x.value),
                (b, g.sum(axis=0, keepdims=True)),
            ]
        return self._record(x.value @ w.value.T + b.value, backward)

    # -- activations -----------------------------------------------------------

    def tanh(self, x: Node) -> Node:
        y = np.tanh(x.value)
        def backward(g):
            return [(x, g * (1.0 - y * y))]
        return self._record(y, backward)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0.0
        def backward(g):
            return [(x, g * mask)]
        return self._record(x.value * mask, backward)

    def sigmoid(self, x: Node) -> Node:
        y = sigmoid(x.value)
        def backward(g):
            return [(x, g * y * (1.0 - y))]
        return self._record(y, backward)

    # -- batch feature ops ------------------------------------------------------

    def center_rows(self, x: Node) -> Node:
        """Subtract the per-column mean so each column sums to zero."""
        if x.shape[0] < 1:
            raise DimensionError("center_rows requires at least one row")
        def backward(g):
            return [(x, g - g.mean(axis=0, keepdims=True))]
        return self._record(x.value - x.value.mean(axis=0, keepdims=True), backward)

    def normalize_rows(self, x: Node, eps: float = 1e-12) -> Node:
        """Rescale each row to unit norm; rows with norm <= eps become zero."""
        if eps <= 0:
            raise UsageError("normalize_rows requires eps > 0")
        norms = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True))
        live = norms > eps
        safe = np.where(live, norms, 1.0)
        y = np.where(live, x.value / safe, 0.0)
        def backward(g):
            inner = (g * y).sum(axis=1, keepdims=True)
            return [(x, np.where(live, (g - inner * y) / safe, 0.0))]
        return self._record(y, backward)

    def gram(self, x: Node) -> Node:
        def backward(g):
            return [(x, (g + g.T) @ x.value)]
        return self._record(x.value @ x.value.T, backward)

    def rbf_gram(self, x: Node) -> Node:
        """K[i, j] = exp(-||x_i - x_j||^2); the diagonal is exactly 1."""
        sq = (x.value * x.value).sum(axis=1, keepdims=True)
        d = np.maximum(sq + sq.T - 2.0 * (x.value @ x.value.T), 0.0)
        k = np.exp(-d)
        np.fill_diagonal(k, 1.0)
        def backward(g):
            w = (g + g.T) * k
            return [(x, -2.0 * (w.sum(axis=1, keepdims=True) * x.value - w @ x.value))]
        return self._record(k, backward)

    def frob_distance(self, a: Node, b: Node, scale: float, eps: float = 1e-12) -> Node:
        """sqrt(sum((a - b)^2) + eps) / scale, as a 1x1 scalar."""
        if a.shape != b.shape:
            raise DimensionError(f"frob_distance: shapes differ, {a.shape} vs {b.shape}")
        if scale <= 0:
            raise UsageError("frob_distance requires scale > 0")
        diff = a.value - b.value
        root = np.sqrt((diff * diff).sum() + eps)
        def backward(g):
            if root == 0.0:
                z = np.zeros_like(diff)
                return [(a, z), (b, z.copy())]
            d = (g[0, 0] / (scale * root)) * diff
            return [(a, d), (b, -d)]
        return self._record(np.array([[root / scale]]), backward)

    # -- reductions ---------------------------------------------------------------

    def sum_all(self, x: Node) -> Node:
        def backward(g):
            return [(x, np.full_like(x.value, g[0, 0]))]
        return self._record(np.array([[x.value.sum()]]), backward)

    def mean_all(self, x: Node) -> Node:
        n = x.value.size
        def backward(g):
            return [(x, np.full_like(x.value, g[0, 0] / n))]
        return self._record(np.array([[x.value.sum() / n]]), backward)

    def sumsq(self, x: Node) -> Node:
        def backward(g):
            return [(x, (2.0 * g[0, 0]) * x.value)]
        return self._record(np.array([[(x.value * x.value).sum()]]), backward)

    # -- gather-style ops for relational objectives ---------------------------------

    def rows_diff(self, x: Node, idx_a: np.ndarray, idx_b: np.ndarray) -> Node:
        """Row differences x[idx_a] - x[idx_b]; indices are fixed data."""
        ia = np.asarray(idx_a, dtype=np.int64)
        ib = np.asarray(idx_b, dtype=np.int64)
        def backward(g):
            buf = np.zeros_like(x.value)
            np.add.at(buf, ia, g)
            np.subtract.at(buf, ib, g)
            return [(x, buf)]
        return self._record(x.value[ia] - x.value[ib], backward)

    def row_norms(self, x: Node, eps: float = 1e-24) -> Node:
        """Per-row norm sqrt(sum(x_i^2) + eps), as a column vector."""
        y = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True) + eps)
        def backward(g):
            return [(x, (g / y) * x.value)]
        return self._record(y, backward)

    def row_dot(self, a: Node, b: Node) -> Node:
        """Per-row inner product, as a column vector."""
        if a.shape != b.shape:
            raise DimensionError(f"row_dot: shapes differ, {a.shape} vs {b.shape}")
        def backward(g):
            return [(a, g * b.value), (b, g * a.value)]
        return self._record((a.value * b.value).sum(axis=1, keepdims=True), backward)

    def huber(self, x: Node, delta: float = 1.0) -> Node:
        """Elementwise Huber: quadratic inside [-delta, delta], linear outside."""
        ax = np.abs(x.value)
        y = np.where(ax <= delta, 0.5 * x.value * x.value, delta * (ax - 0.5 * delta))
        def backward(g):
            return [(x, g * np.clip(x.value, -delta, delta))]
        return self._record(y, backward)

    # -- classification loss ----------------------------------------------------------

    def cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean softmax cross-entropy against integer class labels."""
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        n, k = logits.shape
        if y.shape[0] != n:
            raise DimensionError(f"cross_entropy: {n} logit rows vs {y.shape[0]} labels")
        if y.min(initial=0) < 0 or (n > 0 and y.max() >= k):
            raise InputError(f"labels must lie in [0, {k})")
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        expz = np.exp(z)
        probs = expz / expz.sum(axis=1, keepdims=True)
        rows = np.arange(n)
        nll = np.log(expz.sum(axis=1)) - z[rows, y]
        def backward(g):
            d = probs.copy()
            d[rows, y] -= 1.0
            return [(logits, (g[0, 0] / n) * d)]
        return self._record(np.array([[nll.mean()]]), backward)


def sigmoid(x: Array) -> Array:
    """Numerically stable elementwise logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
