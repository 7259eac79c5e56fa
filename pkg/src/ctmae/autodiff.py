"""A small reverse-mode autodiff engine over numpy arrays.

Each op returns a :class:`Tensor` that remembers its parents and a backward
rule. Nothing is recorded when no input requires a gradient, so frozen
forward passes cost the same as plain numpy. :func:`backward` orders the
recorded graph topologically and accumulates gradients additively at fan-out.

Ops keep the dtype of their inputs: parameters are float32 for training and
can be cast to float64 for finite-difference checks.
"""

from __future__ import annotations

import os
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import HeadDivisibility, LabelOutOfRange, NonScalarLoss, ShapeMismatch

GELU_C = 0.7978845608  # sqrt(2 / pi)
GELU_A = 0.044715
LN_EPS = 1e-6

DEBUG = os.environ.get("CTMAE_DEBUG", "") not in ("", "0")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn: Optional[Callable] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __sub__ = lambda self, other: sub(self, other)
    __mul__ = lambda self, other: mul(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if DEBUG and not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite value produced by an op")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- graph traversal ---------------------------------------------------------

def topological_order(root: Tensor) -> List[Tensor]:
    """Recorded nodes reachable from ``root``, inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Accumulates into ``.grad`` of every leaf that requires a gradient and
    returns a ``{leaf: gradient}`` map.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


# -- elementwise and shape ops -----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


add_broadcast_rowvec = add


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)  # a numpy float64 scalar would upcast float32 data
    return _make(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def absolute(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul_scalar(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (unbroadcast(g, a.shape),))


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick rows along the second-to-last axis.

    ``x`` is ``[n, d]`` with ``idx`` of shape ``[k]``, or ``[B, n, d]`` with
    ``idx`` of shape ``[B, k]``.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim == 2:
        return _gather_2d(x, idx)
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)

    def bw(g):
        gx = np.zeros_like(x.data)
        b = np.arange(x.shape[0])[:, None]
        np.add.at(gx, (b, idx), g)
        return (gx,)
    return _make(out, (x,), bw)


def _gather_2d(x: Tensor, idx):
    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)
    return _make(x.data[idx], (x,), bw)


def scatter_rows(rows: Tensor, idx: np.ndarray, fill: Tensor, n: int) -> Tensor:
    """Build ``[B, n, d]`` holding ``rows`` at ``idx`` and ``fill`` elsewhere.

    Indices within one batch item must be distinct.
    """
    idx = np.asarray(idx, dtype=np.int64)
    B, k, d = rows.shape
    out = np.empty((B, n, d), dtype=np.result_type(rows.data, fill.data))
    out[...] = fill.data
    b = np.arange(B)[:, None]
    out[b, idx] = rows.data

    def bw(g):
        g_rows = g[b, idx]
        g_fill = g.sum(axis=(0, 1)) - g_rows.sum(axis=(0, 1))
        return g_rows, unbroadcast(g_fill, fill.shape)
    return _make(out, (rows, fill), bw)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)
    return _make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- nonlinearities and normalization ----------------------------------------

def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    u = x.data
    t = np.tanh(GELU_C * (u + GELU_A * u ** 3))
    out = 0.5 * u * (1.0 + t)

    def bw(g):
        du = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
        return (g * du,)
    return _make(out, (x,), bw)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, unbroadcast(g * xhat, gain.shape), unbroadcast(g, bias.shape)
    return _make(out, (x, gain, bias), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax_lastdim(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- attention ---------------------------------------------------------------

def multihead_attention(x: Tensor, wq, wk, wv, wo, heads: int,
                        bq=None, bk=None, bv=None, bo=None) -> Tensor:
    """Scaled dot-product self-attention over ``x`` of shape ``[..., t, d]``."""
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise HeadDivisibility(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    lead, t = x.shape[:-2], x.shape[-2]
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)  # [..., t, h, dh] -> [..., h, t, dh]

    def split(y):
        return transpose(reshape(y, lead + (t, heads, dh)), perm)

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    kt = transpose(k, tuple(range(nl + 1)) + (nl + 2, nl + 1))
    att = softmax_lastdim(mul_scalar(matmul(q, kt), 1.0 / np.sqrt(dh)))
    ctx = reshape(transpose(matmul(att, v), perm), lead + (t, d))
    return linear(ctx, wo, bo)


# -- losses ------------------------------------------------------------------

def cross_entropy_weighted(logits: Tensor, labels, weights) -> Tensor:
    """Weighted mean of per-sample negative log-likelihoods.

    ``sum_i w[y_i] * -log p_i[y_i] / sum_i w[y_i]``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"{n} logits rows but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelOutOfRange(f"labels must lie in [0, {C}), got {labels.tolist()}")
    weights = np.asarray(weights, dtype=logits.dtype)
    if weights.shape != (C,):
        raise ShapeMismatch(f"expected {C} class weights, got shape {weights.shape}")
    w = weights[labels]
    total = w.sum()
    logp = log_softmax_lastdim(logits.data)
    rows = np.arange(n)
    loss = -(w * logp[rows, labels]).sum() / total

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p * (w / total)[:, None],)
    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def mean_abs_error(pred: Tensor, target, row_subset) -> Tensor:
    """Mean of ``|pred - target|`` over every element of the selected rows."""
    rows = np.asarray(sorted(row_subset), dtype=np.int64)
    if rows.size == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    target = as_tensor(target)
    diff = sub(gather_rows(pred, rows), gather_rows(target, rows))
    return mean(absolute(diff))
