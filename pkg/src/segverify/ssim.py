"""Windowed structural similarity (SSIM), DSSIM maps and the SSIM training loss.

Windows are square, unweighted and laid out at a fixed stride; statistics are
population (1/N) moments.  ``C3`` defaults to ``C2 / 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParamError, ShapeError

__all__ = [
    "SsimConfig",
    "WindowStats",
    "SsimMap",
    "window_stats",
    "luminance",
    "contrast",
    "structure",
    "ssim_window",
    "ssim_map",
    "ssim_score",
    "ssim_score_grads",
    "dssim_image",
    "ssim_loss",
]


@dataclass(frozen=True)
class SsimConfig:
    window: int = 8
    stride: int = 8
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    c3_override: float | None = None

    def __post_init__(self):
        if self.window < 2:
            raise ParamError("SSIM window must be at least 2 pixels")
        if self.stride < 1:
            raise ParamError("SSIM stride must be positive")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ParamError("SSIM constants must be positive")
        if self.c3_override is not None and self.c3_override <= 0:
            raise ParamError("C3 must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2 if self.c3_override is None else self.c3_override


@dataclass(frozen=True)
class WindowStats:
    mu_x: float
    mu_y: float
    var_x: float
    var_y: float
    sigma_xy: float

    @property
    def sigma_x(self) -> float:
        return math.sqrt(self.var_x)

    @property
    def sigma_y(self) -> float:
        return math.sqrt(self.var_y)


@dataclass
class SsimMap:
    values: np.ndarray
    window: int
    stride: int
    image_shape: tuple = field(default=())

    @property
    def score(self) -> float:
        return float(np.mean(self.values))


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def window_stats(x, y) -> WindowStats:
    x, y = _pair(x, y)
    if x.size < 2:
        raise ParamError("a window needs at least 2 pixels")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    return WindowStats(float(mx), float(my), float(np.mean(dx * dx)),
                       float(np.mean(dy * dy)), float(np.mean(dx * dy)))


def luminance(s: WindowStats, c1: float) -> float:
    return (2 * s.mu_x * s.mu_y + c1) / (s.mu_x ** 2 + s.mu_y ** 2 + c1)


def contrast(s: WindowStats, c2: float) -> float:
    return (2 * math.sqrt(s.var_x * s.var_y) + c2) / (s.var_x + s.var_y + c2)


def structure(s: WindowStats, c3: float) -> float:
    return (s.sigma_xy + c3) / (math.sqrt(s.var_x * s.var_y) + c3)


def ssim_window(x, y, cfg: SsimConfig = SsimConfig()) -> float:
    s = window_stats(x, y)
    return luminance(s, cfg.c1) * contrast(s, cfg.c2) * structure(s, cfg.c3)


# -- vectorised windows ---------------------------------------------------------

def _windows(a: np.ndarray, cfg: SsimConfig) -> np.ndarray:
    """View of shape (..., nh, nw, win, win)."""
    h, w = a.shape[-2:]
    if h < cfg.window or w < cfg.window:
        raise ParamError(f"image {h}x{w} is smaller than the {cfg.window}px SSIM window")
    view = sliding_window_view(a, (cfg.window, cfg.window), axis=(-2, -1))
    return view[..., ::cfg.stride, ::cfg.stride, :, :]


def _moments(a: np.ndarray, b: np.ndarray, cfg: SsimConfig):
    wa, wb = _windows(a, cfg), _windows(b, cfg)
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = np.mean(da * da, axis=(-2, -1))
    var_b = np.mean(db * db, axis=(-2, -1))
    cov = np.mean(da * db, axis=(-2, -1))
    return mu_a, mu_b, var_a, var_b, cov, da, db


def _ssim_values(mu_a, mu_b, var_a, var_b, cov, cfg: SsimConfig) -> np.ndarray:
    sig_ab = np.sqrt(var_a * var_b)
    lum = (2 * mu_a * mu_b + cfg.c1) / (mu_a ** 2 + mu_b ** 2 + cfg.c1)
    con = (2 * sig_ab + cfg.c2) / (var_a + var_b + cfg.c2)
    stru = (cov + cfg.c3) / (sig_ab + cfg.c3)
    return lum * con * stru


def ssim_map(a, b, cfg: SsimConfig = SsimConfig()) -> SsimMap:
    a, b = _pair(a, b)
    mu_a, mu_b, var_a, var_b, cov, _, _ = _moments(a, b, cfg)
    return SsimMap(_ssim_values(mu_a, mu_b, var_a, var_b, cov, cfg), cfg.window, cfg.stride, a.shape)


def ssim_score(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    return ssim_map(a, b, cfg).score


def _scatter(window_grads: np.ndarray, shape: tuple, cfg: SsimConfig) -> np.ndarray:
    """Accumulate per-window pixel gradients (..., nh, nw, win, win) onto the image grid."""
    out = np.zeros(shape, dtype=np.float64)
    nh, nw = window_grads.shape[-4:-2]
    s = cfg.stride
    if s == cfg.window:
        lead = window_grads.shape[:-4]
        block = np.moveaxis(window_grads, -3, -2).reshape(*lead, nh * s, nw * s)
        out[..., :nh * s, :nw * s] += block
        return out
    for di in range(cfg.window):
        for dj in range(cfg.window):
            out[..., di:di + s * (nh - 1) + 1:s, dj:dj + s * (nw - 1) + 1:s] += window_grads[..., di, dj]
    return out


def ssim_score_grads(a, b, cfg: SsimConfig = SsimConfig()):
    """Mean-window SSIM and its gradients with respect to both inputs.

    Leading axes (if any) are treated as a batch: the score is the mean over
    every window of every item, and the gradients have the input's shape.
    """
    a, b = _pair(a, b)
    mu_a, mu_b, var_a, var_b, cov, da, db = _moments(a, b, cfg)
    c1, c2, c3 = cfg.c1, cfg.c2, cfg.c3

    n1 = 2 * mu_a * mu_b + c1
    d1 = mu_a ** 2 + mu_b ** 2 + c1
    lum = n1 / d1
    d2 = var_a + var_b + c2
    if math.isclose(c3, c2 / 2, rel_tol=1e-12):
        # contrast * structure collapses to (2 cov + C2) / (var_a + var_b + C2)
        cs = (2 * cov + c2) / d2
        dcs_dva = dcs_dvb = -cs / d2
        dcs_dcov = 2 / d2
    else:
        p = np.sqrt(var_a * var_b)
        con = (2 * p + c2) / d2
        stru = (cov + c3) / (p + c3)
        cs = con * stru
        dcs_dp = 2 / d2 * stru - con * stru / (p + c3)
        safe = np.where(p > 0, p, 1.0)
        dp_dva = np.where(p > 0, var_b / (2 * safe), 0.0)
        dp_dvb = np.where(p > 0, var_a / (2 * safe), 0.0)
        dcs_dva = -cs / d2 + dcs_dp * dp_dva
        dcs_dvb = -cs / d2 + dcs_dp * dp_dvb
        dcs_dcov = con / (p + c3)

    values = lum * cs
    n_windows = values.size
    npix = cfg.window * cfg.window
    dl_dma = (2 * mu_b - 2 * mu_a * lum) / d1
    dl_dmb = (2 * mu_a - 2 * mu_b * lum) / d1

    def pix(dmu, dvar, own, other):
        return (dmu[..., None, None] + 2 * dvar[..., None, None] * own
                + (lum * dcs_dcov)[..., None, None] * other) / (npix * n_windows)

    ga = pix(dl_dma * cs, lum * dcs_dva, da, db)
    gb = pix(dl_dmb * cs, lum * dcs_dvb, db, da)
    score = float(np.mean(values))
    return score, _scatter(ga, a.shape, cfg), _scatter(gb, b.shape, cfg)


def dssim_image(a, b, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-window (1 - SSIM) / 2 spread over the window's pixels.

    Overlapping windows are averaged; pixels no window covers are 0.
    """
    a, b = _pair(a, b)
    smap = ssim_map(a, b, cfg)
    d = (1.0 - smap.values) / 2.0
    spread = np.broadcast_to(d[..., None, None], d.shape + (cfg.window, cfg.window))
    total = _scatter(spread, a.shape, cfg)
    cover = _scatter(np.ones_like(spread), a.shape, cfg)
    out = np.divide(total, cover, out=np.zeros_like(total), where=cover > 0)
    return np.clip(out, 0.0, 1.0)


def ssim_loss(rec_patches, gt_patches, cfg: SsimConfig = SsimConfig()):
    """``1 - SSIM`` averaged over every window of every patch pair.

    Returns ``(loss, grad)`` where ``grad`` has the stacked shape of
    ``rec_patches``.
    """
    rec = np.asarray(rec_patches, dtype=np.float64)
    gt = np.asarray(gt_patches, dtype=np.float64)
    if rec.size == 0 or (rec.ndim == 3 and rec.shape[0] == 0):
        raise ParamError("ssim_loss needs at least one patch")
    score, grad, _ = ssim_score_grads(rec, gt, cfg)
    return 1.0 - score, -grad
