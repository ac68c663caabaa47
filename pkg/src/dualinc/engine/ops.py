"""Differentiable operations over :class:`~dualinc.engine.tensor.Tensor`.

Each function computes its forward value with numpy and attaches a closure
returning one gradient per input (``None`` for non-differentiable inputs).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ShapeError
from . import kernels
from .tensor import Tensor, make_node

LEAKY_SLOPE = 0.1


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# -- elementwise and reductions ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    a = _as_tensor(a)
    f = a.dtype.type(factor)
    return make_node(a.data * f, (a,), lambda g: (g * f,), "scale")


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_node(x * x, (a,), lambda g: (2 * x * g,), "square")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return make_node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_node(
        np.asarray(a.data.mean(), dtype=a.dtype), (a,), lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean"
    )


def take_rows(a: Tensor, index) -> Tensor:
    """Select rows along the first axis (gradient scatters back)."""
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def grad(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return make_node(a.data[idx], (a,), grad, "take_rows")


def take_columns(a: Tensor, count: int) -> Tensor:
    """Keep the first ``count`` columns of a 2-D tensor (old-class logits)."""
    if a.data.ndim != 2 or not 0 < count <= a.shape[1]:
        raise ShapeError(f"cannot take {count} columns of shape {a.shape}")
    shape = a.shape

    def grad(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, :count] = g
        return (out,)

    return make_node(np.ascontiguousarray(a.data[:, :count]), (a,), grad, "take_columns")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    data = x.data
    s = data.dtype.type(slope)
    mask = data >= 0
    out = np.where(mask, data, data * s)
    return make_node(out, (x,), lambda g: (np.where(mask, g, g * s),), "leaky_relu")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    hw = h * w

    def grad(g):
        return (np.broadcast_to((g / hw)[:, :, None, None], (n, c, h, w)).copy(),)

    return make_node(x.data.mean(axis=(2, 3)), (x,), grad, "global_avg_pool")


# -- dense layers --------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as D x K."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def grad(g):
        grads = [g @ wd.T, xd.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, grad, "linear")


def conv2d(
    x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 1
) -> Tensor:
    """2-D cross-correlation with zero padding, via patch extraction + matmul."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match {k} filters")
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(k, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))

    def grad(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(k, -1)
        gk = (gmat @ cols.T).reshape(kernel.shape)
        gcols = wmat.T @ gmat
        gxp = kernels.col2im(gcols, n, c, hp, wp, kh, kw, stride, ho, wo)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [np.ascontiguousarray(gx), gk]
        if bias is not None:
            grads.append(gmat.sum(axis=1))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node(out, parents, grad, "conv2d")


@dataclass
class BatchNormState:
    """Running per-channel statistics for :func:`batchnorm2d`."""

    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=np.float32)

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.channels, self.momentum, self.eps, self.running_mean.copy(), self.running_var.copy()
        )


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel batch normalization.

    Train mode normalizes with the biased batch variance and folds the batch
    statistics into ``state`` (the running variance uses the unbiased
    estimate). Eval mode normalizes with the running statistics.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or state.channels != c:
        raise ShapeError(f"batchnorm2d parameters do not match {c} channels")
    xd = x.data
    dt = xd.dtype
    gd = gamma.data.reshape(1, c, 1, 1)
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d in train mode needs at least two values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + state.eps)).astype(dt)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))

        def grad(g):
            gsum = g.sum(axis=(0, 2, 3))
            gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
            gx = (gd * inv_std.reshape(1, c, 1, 1) / m) * (
                m * g - gsum.reshape(1, c, 1, 1) - xhat * gxhat_sum.reshape(1, c, 1, 1)
            )
            return (gx.astype(dt), gxhat_sum.astype(dt), gsum.astype(dt))

    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(state.running_var.astype(dt) + state.eps)).astype(dt)
        xhat = (xd - state.running_mean.astype(dt).reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)

        def grad(g):
            gx = g * (gd * inv_std.reshape(1, c, 1, 1))
            return (gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)
    return make_node(out.astype(dt, copy=False), (x, gamma, beta), grad, "batchnorm2d")


# -- losses ----------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax on a plain array (no graph node)."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects N x K logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.intp)
    n, k = z.shape
    if t.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {t.shape}")
    if n and (t.min() < 0 or t.max() >= k):
        raise ValueError(f"target out of range [0, {k})")
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def grad(g):
        d = np.exp(logp)
        d[rows, t] -= 1
        return ((d * (g / n)).astype(z.dtype),)

    return make_node(np.asarray(loss, dtype=z.dtype), (logits,), grad, "softmax_cross_entropy")


def soft_cross_entropy(logits: Tensor, target_probs, temperature: float = 1.0) -> Tensor:
    """Distillation loss ``-mean_n sum_k q[n,k] log softmax(z[n]/T)[k]``."""
    z = logits.data
    q = np.asarray(target_probs, dtype=z.dtype)
    if z.ndim != 2 or q.shape != z.shape:
        raise ShapeError(f"soft_cross_entropy: logits {z.shape} vs targets {q.shape}")
    n = z.shape[0]
    t = z.dtype.type(temperature)
    logp = log_softmax(z / t)
    loss = -(q * logp).sum(axis=1).mean()

    def grad(g):
        return (((np.exp(logp) - q) * (g / (n * t))).astype(z.dtype),)

    return make_node(np.asarray(loss, dtype=z.dtype), (logits,), grad, "soft_cross_entropy")
