"""Segmentation verification: mask the boundary strip, reconstruct patchwise,
stitch, compare with the original by SSIM and threshold into a verdict."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ModelError, ParamError, ShapeError
from .imagecore import (apply_strip_mask, as_image, as_mask, boundary_strip, l2_error,
                        split_patches, stitch_patches)
from .nnet import RecModel, generate
from .ssim import SsimConfig, ssim_score

DEFAULT_STRIP_WIDTH = 3
DEFAULT_PATCH = 16
DEFAULT_DSC_GOOD = 0.7
DEFAULT_MARGIN = 1e-3


@dataclass(frozen=True)
class VerifyConfig:
    strip_width: int = DEFAULT_STRIP_WIDTH
    patch: int = DEFAULT_PATCH
    ssim: SsimConfig = field(default_factory=SsimConfig)
    mask_channel: str = "strip"

    def __post_init__(self):
        if self.mask_channel not in ("strip", "segmentation"):
            raise ParamError(f"mask_channel must be 'strip' or 'segmentation', got {self.mask_channel!r}")


class Label(str, enum.Enum):
    ACCEPT = "Accept"
    UNCERTAIN = "Uncertain"
    REJECT = "Reject"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class Thresholds:
    t_accept: float
    t_reject: float
    report: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.t_reject > self.t_accept:
            raise ParamError(f"t_reject {self.t_reject} exceeds t_accept {self.t_accept}")

    def to_dict(self) -> dict:
        return {"t_accept": self.t_accept, "t_reject": self.t_reject, **self.report}

    @classmethod
    def from_dict(cls, d: dict) -> "Thresholds":
        report = {k: v for k, v in d.items() if k not in ("t_accept", "t_reject")}
        return cls(float(d["t_accept"]), float(d["t_reject"]), report)


@dataclass(frozen=True)
class Verdict:
    label: Label
    ssim: float
    l2: float | None
    thresholds: Thresholds


def model_inputs(img, seg, cfg: VerifyConfig = VerifyConfig()):
    """Generator inputs for every patch: (P, 2, p, p) plus the tiling grid and strip."""
    img, seg = as_image(img), as_mask(seg)
    if img.shape != seg.shape:
        raise ShapeError(f"image {img.shape} and segmentation {seg.shape} differ")
    strip = boundary_strip(seg, cfg.strip_width)
    masked = apply_strip_mask(img, strip)
    m_patches, grid = split_patches(masked, cfg.patch, cfg.patch)
    second = strip if cfg.mask_channel == "strip" else seg
    s_patches, _ = split_patches(second.astype(np.float64), cfg.patch, cfg.patch)
    x = np.stack([np.stack(m_patches), np.stack(s_patches)], axis=1)
    return x, grid, strip


def training_pairs(records, cfg: VerifyConfig = VerifyConfig()):
    """Generator training set from reference segmentations only: (inputs, targets)."""
    xs, ys = [], []
    for img, ref in records:
        x, _, _ = model_inputs(img, ref, cfg)
        gt, _ = split_patches(as_image(img), cfg.patch, cfg.patch)
        xs.append(x)
        ys.append(np.stack(gt)[:, None])
    if not xs:
        raise ParamError("no training records")
    return np.concatenate(xs), np.concatenate(ys)


def reconstruct(img, seg, model: RecModel, cfg: VerifyConfig = VerifyConfig()) -> np.ndarray:
    if model is None:
        raise ModelError("reconstruction needs a trained generator")
    x, grid, _ = model_inputs(img, seg, cfg)
    out = generate(model, x[:, 0], x[:, 1])
    return stitch_patches(list(out), grid)


def verification_score(img, rec, cfg: VerifyConfig = VerifyConfig()) -> tuple[float, float]:
    img, rec = as_image(img), as_image(rec)
    if img.shape != rec.shape:
        raise ShapeError(f"image {img.shape} and reconstruction {rec.shape} differ")
    return ssim_score(img, rec, cfg.ssim), l2_error(img, rec)


def verdict(score: float, th: Thresholds, l2: float | None = None) -> Verdict:
    """Accept iff ssim >= t_accept; Reject iff ssim < t_reject; otherwise Uncertain."""
    if th.t_reject > th.t_accept:
        raise ParamError("t_reject exceeds t_accept")
    if score >= th.t_accept:
        label = Label.ACCEPT
    elif score < th.t_reject:
        label = Label.REJECT
    else:
        label = Label.UNCERTAIN
    return Verdict(label, float(score), l2, th)


def verify_sample(img, seg, model: RecModel, th: Thresholds, cfg: VerifyConfig = VerifyConfig()) -> Verdict:
    rec = reconstruct(img, seg, model, cfg)
    s, l2 = verification_score(img, rec, cfg)
    return verdict(s, th, l2)


def error_rates(scores, dsc, th: Thresholds, dsc_good: float = DEFAULT_DSC_GOOD) -> dict:
    """False negatives (bad accepted), false-positive rate (good rejected) and band occupancy."""
    scores = np.asarray(scores, dtype=np.float64)
    good = np.asarray(dsc, dtype=np.float64) >= dsc_good
    labels = [verdict(s, th).label for s in scores]
    accept = np.array([lab is Label.ACCEPT for lab in labels])
    reject = np.array([lab is Label.REJECT for lab in labels])
    uncertain = ~accept & ~reject
    n_good, n_bad = int(good.sum()), int((~good).sum())
    return {
        "n_good": n_good,
        "n_bad": n_bad,
        "false_negatives": int((accept & ~good).sum()),
        "false_positive_rate": float((reject & good).sum() / n_good) if n_good else 0.0,
        "good_not_accepted_rate": float((~accept & good).sum() / n_good) if n_good else 0.0,
        "uncertain_fraction": float(uncertain.mean()) if len(scores) else 0.0,
    }


def calibrate_thresholds(validation, dsc_good: float = DEFAULT_DSC_GOOD,
                         margin: float = DEFAULT_MARGIN) -> Thresholds:
    """Place t_accept just above every bad validation score (no false negatives)
    and t_reject just below every good one, never above t_accept.

    ``validation`` is an iterable of ``(ssim, reference_dsc)`` pairs.
    """
    if not margin > 0:
        raise ParamError("margin must be positive: Accept is inclusive at t_accept")
    pairs = [(float(s), float(d)) for s, d in validation]
    bad = [s for s, d in pairs if d < dsc_good]
    good = [s for s, d in pairs if d >= dsc_good]
    if not bad:
        raise CalibrationError(f"validation set has no samples with DSC < {dsc_good}")
    t_accept = max(bad) + margin
    t_reject = min(min(good) - margin, t_accept) if good else t_accept
    provisional = Thresholds(t_accept, t_reject)
    scores, dsc = zip(*pairs)
    report = {"dsc_good": dsc_good, "margin": margin,
              **{f"validation_{k}": v for k, v in error_rates(scores, dsc, provisional, dsc_good).items()}}
    return Thresholds(t_accept, t_reject, report)


def roc_auc(scores, positive) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic (ties count half)."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise ParamError("ROC-AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
