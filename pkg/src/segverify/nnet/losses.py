"""Scalar losses.  Each array-level function returns ``(value, d value / d pred)``."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..ssim import SsimConfig, ssim_loss
from .tensor import Tensor


def _check(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    return pred, target


def mae_loss(pred, target):
    pred, target = _check(pred, target)
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def mse_loss(pred, target):
    pred, target = _check(pred, target)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def bce_logit_loss(logits, target):
    """Binary cross-entropy on raw logits, numerically stable for large |z|."""
    z, t = _check(logits, target)
    value = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    e = np.exp(-np.abs(z))
    prob = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(np.mean(value)), (prob - t) / z.size


def ssim_recon_loss(pred, target, cfg: SsimConfig = SsimConfig()):
    """``1 - SSIM`` for a batch of single-channel patches shaped (N, 1, H, W) or (N, H, W)."""
    pred, target = _check(pred, target)
    value, grad = ssim_loss(pred, target, cfg)
    return value, grad


def as_op(loss_fn, pred: Tensor, target, **kwargs) -> Tensor:
    """Lift an array-level loss into the autodiff graph."""
    value, grad = loss_fn(pred.values, target, **kwargs)

    def backward(g):
        pred.accumulate(g * grad)

    return Tensor(np.array(value), (pred,), backward)
