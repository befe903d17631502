"""Minimal reverse-mode autodiff over dense 2-D float64 arrays.

Only the handful of operations the grammar model composes is provided.
Tensors record their parents and a backward closure; `backward()` walks the
implicit DAG in reverse creation order. Graphs are built fresh for every
forward pass and are single-owner; independent graphs may live on different
threads, gradient accumulation within one backward pass is sequential.
"""

from __future__ import annotations

import itertools

import numpy as np

EPS = 1e-7  # probability clip used inside the cross-entropy loss


class DimensionError(ValueError):
    """Shapes of the operands do not line up."""


class ParameterError(ValueError):
    """An operation was called with an invalid parameter value."""


class GraphError(RuntimeError):
    """The computation graph was used in an unsupported way."""


_ids = itertools.count()


class Tensor:
    """Dense 2-D float64 array, optionally part of a computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_nid", "_consumed")

    def __init__(self, values, requires_grad=False, _parents=(), _bwd=None):
        data = np.asarray(values, dtype=np.float64)
        if data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {data.shape}")
        self.data = data
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd
        self._nid = next(_ids)
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(values, rng=None, shape=None, scale=0.1):
    """Leaf tensor with gradient tracking; random uniform(-scale, scale) if rng given."""
    if values is None:
        values = rng.uniform(-scale, scale, size=shape)
    return Tensor(values, requires_grad=True)


# ---------------------------------------------------------------------------
# forward kernels, shared with graph-free evaluation paths
# ---------------------------------------------------------------------------

def _row_max(x):
    # axis-1 reductions are slow for short rows; fold columns instead
    m = x[:, 0].copy()
    for j in range(1, x.shape[1]):
        np.maximum(m, x[:, j], out=m)
    return m.reshape(-1, 1)


def softmax_rows(x):
    """Row-wise softmax with max-subtraction, plain ndarray in/out."""
    e = np.exp(x - _row_max(x))
    return e / (e @ np.ones((x.shape[1], 1)))


def sigmoid_values(x):
    """Elementwise logistic function, stable for large |x|."""
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def bce_rows(pred, target):
    """Per-row binary cross entropy against one shared target row, clipped at EPS."""
    p = np.clip(pred, EPS, 1.0 - EPS)
    w = np.where(target >= 0.5, p, 1.0 - p)
    # for soft targets the two log terms are weighted rather than selected
    if np.any((target > 0.0) & (target < 1.0)):
        w = None
        lp, lq = np.log(p), np.log(1.0 - p)
        return -(target * lp + (1.0 - target) * lq) @ np.ones((pred.shape[1], 1))
    np.log(w, out=w)
    return -(w @ np.ones((pred.shape[1], 1)))


def gumbel_noise(rng, shape):
    """Standard Gumbel draws g = -log(-log(u)), u uniform on (0, 1)."""
    u = rng.random(shape)
    np.clip(u, 1e-300, None, out=u)
    g = np.log(u)
    np.negative(g, out=g)
    np.log(g, out=g)
    np.negative(g, out=g)
    return g


# ---------------------------------------------------------------------------
# graph operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), _bwd=None)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    out._bwd = bwd
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, _parents=(a, b))
    out._bwd = lambda g: (g, g)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor([[x.data.sum()]], _parents=(x,))
    out._bwd = lambda g: (np.full(x.shape, g[0, 0]),)
    return out


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Each row repeated k times consecutively (row i -> rows i*k .. i*k+k-1)."""
    out = Tensor(np.repeat(x.data, k, axis=0), _parents=(x,))
    m, n = x.shape
    out._bwd = lambda g: (g.reshape(m, k, n).sum(axis=1),)
    return out


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx], _parents=(x,))

    def bwd(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, idx, g)
        return (gx,)

    out._bwd = bwd
    return out


def softmax(x: Tensor) -> Tensor:
    s = softmax_rows(x.data)
    out = Tensor(s, _parents=(x,))

    def bwd(g):
        dot = (g * s) @ np.ones((s.shape[1], 1))
        return (s * (g - dot),)

    out._bwd = bwd
    return out


def gumbel_softmax(logits: Tensor, temperature: float, noise=None, rng=None) -> Tensor:
    """softmax((logits + noise) / temperature); soft relaxation, no straight-through.

    With noise omitted, fresh Gumbel draws are taken from `rng`; with an
    all-zeros noise array this is exactly softmax(logits / temperature).
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if noise is None:
        if rng is None:
            raise ParameterError("gumbel_softmax needs either explicit noise or an rng")
        noise = gumbel_noise(rng, logits.shape)
    noise = np.asarray(noise, dtype=np.float64).reshape(logits.shape)
    z = (logits.data + noise) / temperature
    s = softmax_rows(z)
    out = Tensor(s, _parents=(logits,))

    def bwd(g):
        dot = (g * s) @ np.ones((s.shape[1], 1))
        return (s * (g - dot) / temperature,)

    out._bwd = bwd
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_values(x.data)
    out = Tensor(s, _parents=(x,))
    out._bwd = lambda g: (g * s * (1.0 - s),)
    return out


def bce(pred: Tensor, target) -> Tensor:
    """Row-wise binary cross entropy, one column per input row; scalar for 1xT input.

    Predictions are clipped to [EPS, 1-EPS] inside the logs; the gradient is
    zero where the clip is active.
    """
    target = np.asarray(target, dtype=np.float64).reshape(1, -1)
    if target.shape[1] != pred.shape[1]:
        raise DimensionError(f"bce: target length {target.shape[1]} vs pred {pred.shape}")
    out = Tensor(bce_rows(pred.data, target), _parents=(pred,))

    def bwd(g):
        p = np.clip(pred.data, EPS, 1.0 - EPS)
        inside = (pred.data > EPS) & (pred.data < 1.0 - EPS)
        dp = (1.0 - target) / (1.0 - p) - target / p
        return (g * dp * inside,)

    out._bwd = bwd
    return out


def backward(loss: Tensor):
    """Reverse pass from a scalar loss; returns {tensor: gradient} for every
    reachable gradient-tracking tensor and accumulates into `.grad`.

    A loss tensor may only be driven backward once; rebuild the graph for the
    next step instead of reusing it.
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this loss; rebuild the graph")
    loss._consumed = True

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads = {loss: np.ones((1, 1))}
    for node in reversed(order):
        g = grads.get(node)
        if g is None or node._bwd is None:
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if not parent.requires_grad:
                continue
            if parent in grads:
                grads[parent] += pg
            else:
                grads[parent] = pg.copy()  # never alias a closure-owned array
    for node, g in grads.items():
        node.grad = g if node.grad is None else node.grad + g
    return grads


def grad_or_zeros(t: Tensor):
    """Gradient of a leaf after backward(); a disconnected leaf has zero gradient."""
    return t.grad if t.grad is not None else np.zeros(t.shape)
