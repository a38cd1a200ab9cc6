"""Layer primitives (NCHW layout) with exact analytic backward passes."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor

LEAK = 0.2


# -- raw conv kernels -------------------------------------------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    """Cross-correlation.  Returns ``(out, cache)``; ``cache`` feeds :func:`conv2d_backward`."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, k, k2 = w.shape
    if c != cw or k != k2 or b.shape != (o,):
        raise ShapeError(f"conv2d shapes inconsistent: x{x.shape} w{w.shape} b{b.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    hp, wp = xp.shape[2:]
    if hp < k or wp < k:
        raise ShapeError("kernel larger than padded input")
    view = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = view.shape[2:4]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.reshape(o, -1)
    out = (cols @ wmat.T + b).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    cache = (x.shape, xp.shape, cols, w, stride, pad, ho, wo)
    return np.ascontiguousarray(out), cache


def conv2d_backward(gout: np.ndarray, cache):
    """Returns ``(dx, dw, db)``."""
    x_shape, xp_shape, cols, w, stride, pad, ho, wo = cache
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    g2 = gout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (g2.T @ cols).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


# -- differentiable ops --------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    out, cache = conv2d_forward(x.values, w.values, b.values, stride, pad)

    def backward(g):
        dx, dw, db = conv2d_backward(g, cache)
        x.accumulate(dx)
        w.accumulate(dw)
        b.accumulate(db)

    return Tensor(out, (x, w, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``x`` of shape (N, F) and ``w`` of shape (F, O)."""
    if x.values.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear shapes inconsistent: x{x.shape} w{w.shape} b{b.shape}")
    out = x.values @ w.values + b.values

    def backward(g):
        x.accumulate(g @ w.values.T)
        w.accumulate(x.values.T @ g)
        b.accumulate(g.sum(axis=0))

    return Tensor(out, (x, w, b), backward)


def leaky_relu(x: Tensor, slope: float = LEAK) -> Tensor:
    pos = x.values > 0
    out = np.where(pos, x.values, slope * x.values)

    def backward(g):
        x.accumulate(np.where(pos, g, slope * g))

    return Tensor(out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.values)

    def backward(g):
        x.accumulate(g * out * (1.0 - out))

    return Tensor(out, (x,), backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    if x.values.ndim != 4:
        raise ShapeError(f"upsample2x expects NCHW input, got {x.shape}")
    out = x.values.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        n, c, h, w = x.shape
        x.accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return Tensor(out, (x,), backward)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.values for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate(g[tuple(idx)])

    return Tensor(out, tuple(tensors), backward)


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    out = x.values.reshape(shape[0], -1)

    def backward(g):
        x.accumulate(g.reshape(shape))

    return Tensor(out, (x,), backward)


def scale_add(terms: list[tuple[float, Tensor]]) -> Tensor:
    """Weighted sum of equally shaped tensors."""
    out = sum(wt * t.values for wt, t in terms)

    def backward(g):
        for wt, t in terms:
            t.accumulate(wt * g)

    return Tensor(out, tuple(t for _, t in terms), backward)
