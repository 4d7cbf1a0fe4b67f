"""A small reverse-mode automatic differentiation engine over float64 numpy arrays.

Each op records its parents and a closure that pushes the upstream gradient
through the local Jacobian. ``backward()`` walks the graph in reverse
topological order. The op set is exactly what the transformer and routing
stack need; masks, token ids, and temperatures enter ops as plain numpy
data, never as graph nodes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

ArrayLike = "np.ndarray | float | int"


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the shape of its source."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    """Node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse accumulation from this (scalar) node."""
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_sum_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_sum_to_shape(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_sum_to_shape(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_sum_to_shape(gb, b.data.shape))

    return _make(a.data @ b.data, (a, b), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        a._accumulate(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.data.shape

    def bwd(g):
        a._accumulate(g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), bwd)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; the selected elements must be disjoint."""

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        a._accumulate(ga)

    return _make(a.data[key], (a,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather with scatter-add backward (repeated ids accumulate)."""
    ids = np.asarray(ids)

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return _make(table.data[ids], (table,), bwd)


def reduce_sum(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(g / a.data)

    return _make(np.log(a.data), (a,), bwd)


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    u = _GELU_K * (x + 0.044715 * x**3)
    t = np.tanh(u)

    def bwd(g):
        du = _GELU_K * (1.0 + 3 * 0.044715 * x**2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du))

    return _make(0.5 * x * (1.0 + t), (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bwd(g):
        if gain.requires_grad:
            gain._accumulate(_sum_to_shape(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_sum_to_shape(g, bias.data.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bwd)


def masked_temp_softmax(logits: Tensor, mask: np.ndarray | None, tau: float) -> Tensor:
    """Softmax over the last axis after dividing by ``tau``.

    Slots where ``mask`` is False get probability exactly 0 and receive no
    gradient. Every row must keep at least one unmasked slot.
    """
    z = logits.data / tau
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    c = z.max(axis=-1, keepdims=True)
    e = np.exp(z - c)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        logits._accumulate(_sum_to_shape((g - dot) * y / tau, logits.data.shape))

    return _make(y, (logits,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean of per-row ``-log p(target)`` over rows with weight > 0.

    ``logits`` is [N, V]; ``targets`` [N] int; ``weights`` [N] non-negative.
    """
    targets = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no rows carry weight")
    z = logits.data
    c = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - c).sum(axis=-1, keepdims=True)) + c
    rows = np.arange(z.shape[0])
    nll = lse[:, 0] - z[rows, targets]
    loss = (nll * w).sum() / total

    def bwd(g):
        p = np.exp(z - lse)
        p[rows, targets] -= 1.0
        logits._accumulate(p * (w / total)[:, None] * g)

    return _make(np.asarray(loss), (logits,), bwd)


def parameters(arrays: dict[str, np.ndarray], trainable: Iterable[str]) -> dict[str, Tensor]:
    """Wrap a named array store as graph leaves, marking the trainable subset."""
    trainable = set(trainable)
    unknown = trainable - arrays.keys()
    if unknown:
        raise KeyError(f"unknown trainable parameters: {sorted(unknown)}")
    return {k: Tensor(v, requires_grad=(k in trainable)) for k, v in arrays.items()}
