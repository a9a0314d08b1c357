"""Minimal tape-free reverse-mode autodiff over numpy arrays.

Each ``Tensor`` remembers its parents and a closure that pushes its gradient
to them.  ``Tensor.backward`` walks the graph in reverse topological order.
Only the handful of fused ops the toy transformer needs are provided.
"""

from __future__ import annotations

import math

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data) if grad is None else grad)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
                if node.parents:
                    node.grad = None  # free intermediate buffers


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _push(t: Tensor, g):
    if t.requires_grad:
        t._accumulate(g)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _push(a, unbroadcast(g, a.shape))
        _push(b, unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _push(a, unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _push(b, unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _push(a, unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.data.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            _push(b, gb)

    return Tensor(a.data @ b.data, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _push(a, g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        _push(a, g.transpose(inv))

    return Tensor(a.data.transpose(axes), (a,), bw)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """``table[idx]`` for an integer index array of any shape."""

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        _push(table, gt)

    return Tensor(table.data[idx], (table,), bw)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _push(a, unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            _push(b, unbroadcast(np.where(cond, 0.0, g), b.shape))

    return Tensor(out, (a, b), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        if gamma.requires_grad:
            _push(gamma, (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _push(beta, g.reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _push(x, gx)

    return Tensor(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    u = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    th = np.tanh(u)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        _push(x, g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du))

    return Tensor(0.5 * x.data * (1.0 + th), (x,), bw)


def softmax_rows(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def attention(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + bias) v over the last two axes."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = softmax_rows(q.data @ np.swapaxes(k.data, -1, -2) * scale + bias)
    out = p @ v.data

    def bw(g):
        if v.requires_grad:
            _push(v, np.swapaxes(p, -1, -2) @ g)
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        if q.requires_grad:
            _push(q, ds @ k.data * scale)
        if k.requires_grad:
            _push(k, np.swapaxes(ds, -1, -2) @ q.data * scale)

    return Tensor(out, (q, k, v), bw)


def masked_mse(pred: Tensor, target: np.ndarray, rows: np.ndarray) -> Tensor:
    """Mean squared error over the rows flagged in ``rows`` (all feature columns).

    An empty selection yields a loss of exactly 0 with zero gradient.
    """
    w = rows[..., None].astype(np.float64)
    n = float(rows.sum()) * pred.shape[-1]
    diff = (pred.data - target) * w
    loss = float((diff * diff).sum() / n) if n else 0.0

    def bw(g):
        if n:
            _push(pred, g * 2.0 * diff / n)
        else:
            _push(pred, np.zeros_like(pred.data))

    return Tensor(np.array(loss), (pred,), bw)
