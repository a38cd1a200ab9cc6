"""FGSM perturbations against the DSC regressor and against the SSIM verifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError, ParamError, ShapeError
from .imagecore import as_image, split_patches, stitch_patches
from .nnet import RecModel, RegModel, Tensor
from .nnet.losses import mse_loss
from .ssim import ssim_score_grads
from .verify import Label, Thresholds, VerifyConfig, model_inputs, verdict

TARGETS = ("untargeted-ascent", "maximize-score")
CHANNELS = ("image", "segmentation")


@dataclass(frozen=True)
class AttackSpec:
    epsilon: float = 0.5
    target: str = "maximize-score"
    clip: tuple = (0.0, 1.0)
    channels: tuple = CHANNELS
    iters: int = 1
    step: float | None = None  # per-iteration step; defaults to epsilon

    def __post_init__(self):
        if self.epsilon < 0:
            raise ParamError("epsilon must be non-negative")
        if self.target not in TARGETS:
            raise ParamError(f"unknown attack target {self.target!r}")
        if not set(self.channels) <= set(CHANNELS) or not self.channels:
            raise ParamError(f"channels must be a subset of {CHANNELS}")
        if self.iters < 0:
            raise ParamError("iters must be non-negative")

    @property
    def step_size(self) -> float:
        return self.epsilon if self.step is None else self.step


@dataclass
class AttackResult:
    image: np.ndarray
    seg: np.ndarray
    score_before: float
    score_after: float
    verdict_before: Label | None = None
    verdict_after: Label | None = None
    trajectory: list = field(default_factory=list)
    best_score: float | None = None
    ever_accepted: bool = False
    notes: list = field(default_factory=list)


def _values(x):
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def fgsm_step(x, grad, eps: float, clip=(0.0, 1.0)):
    """``clip(x + eps * sign(grad))``; ``sign(0) = 0``.  Tensors in, tensor out."""
    xv = _values(x)
    gv = x.grad if (isinstance(x, Tensor) and grad is None) else _values(grad)
    if gv is None or gv.shape != xv.shape:
        raise ShapeError(f"gradient shape {None if gv is None else gv.shape} does not match {xv.shape}")
    if eps < 0:
        raise ParamError("epsilon must be non-negative")
    out = np.clip(xv + eps * np.sign(gv), clip[0], clip[1])
    return Tensor(out) if isinstance(x, Tensor) else out


def _check_model(model) -> None:
    if model is None or not getattr(model, "params", None):
        raise ModelError("attack needs a model with parameters")
    model.check_finite()


def regnet_input_grad(model: RegModel, x: np.ndarray, ref_dsc: float, target: str):
    """Prediction and gradient of the attack objective w.r.t. the (1, 2, S, S) input."""
    xt = Tensor(x, requires_grad=True)
    pred = model.forward(xt, model.leaves(requires_grad=False))
    p = float(pred.values.ravel()[0])
    if not np.isfinite(p):
        raise ModelError("regressor produced a non-finite prediction")
    if target == "untargeted-ascent":
        _, g = mse_loss(pred.values, np.full_like(pred.values, ref_dsc))
        pred.backward(g)
    else:
        pred.backward(np.ones_like(pred.values))
    return p, xt.grad


def attack_regnet(model: RegModel, img, seg, ref_dsc: float, spec: AttackSpec = AttackSpec()) -> AttackResult:
    """FGSM on the regressor: ``J = MSE(pred, ref_dsc)`` (untargeted) or ``J = pred``.

    Both objectives ascend; with ``maximize-score`` the perturbation pushes the
    predicted DSC up regardless of which side of the reference it started on.
    """
    _check_model(model)
    img = as_image(img)
    seg_f = np.asarray(seg, dtype=np.float64)
    if seg_f.shape != img.shape:
        raise ShapeError(f"image {img.shape} and segmentation {seg_f.shape} differ")
    x = np.stack([img, seg_f])[None]
    before, grad = regnet_input_grad(model, x, ref_dsc, spec.target)
    keep = np.array([c in spec.channels for c in CHANNELS], dtype=np.float64)[None, :, None, None]
    x_adv = fgsm_step(x, grad * keep, spec.epsilon, spec.clip)
    after = float(model(x_adv)[0, 0])
    return AttackResult(x_adv[0, 0], x_adv[0, 1], before, after, trajectory=[before, after])


# -- verifier attack ----------------------------------------------------------------

def verifier_score_grad(model: RecModel, img: np.ndarray, seg: np.ndarray, cfg: VerifyConfig):
    """End-to-end SSIM(img, reconstruct(img, seg)) and its gradient w.r.t. ``img``.

    The segmentation enters only through binarisation and strip extraction,
    which are piecewise constant, so its gradient is zero.
    """
    seg_bin = np.asarray(seg) >= 0.5
    x, grid, strip = model_inputs(img, seg_bin, cfg)
    xt = Tensor(x, requires_grad=True)
    out = model.forward(xt, model.leaves(requires_grad=False))
    patches = np.clip(out.values[:, 0], 0.0, 1.0)
    rec = stitch_patches(list(patches), grid)
    score, g_img, g_rec = ssim_score_grads(img, rec, cfg.ssim)
    g_patches, _ = split_patches(g_rec, cfg.patch, cfg.patch)
    inside = (out.values[:, 0] >= 0.0) & (out.values[:, 0] <= 1.0)
    out.backward((np.stack(g_patches) * inside)[:, None])
    g_masked = stitch_patches(list(xt.grad[:, 0]), grid)
    grad = g_img + g_masked * (~strip)
    return score, grad, rec


def attack_verifier(rec: RecModel, th: Thresholds, img, seg, spec: AttackSpec = AttackSpec(),
                    cfg: VerifyConfig = VerifyConfig()) -> AttackResult:
    """Iterated sign-gradient ascent on the verifier's SSIM score.

    Each iterate stays within ``epsilon`` (L-inf) of the original and inside the
    clip range.  The trajectory records the score of every iterate; the attack
    succeeds if any iterate reaches Accept.
    """
    _check_model(rec)
    img0 = as_image(img)
    seg0 = np.asarray(seg, dtype=np.float64)
    if seg0.shape != img0.shape:
        raise ShapeError(f"image {img0.shape} and segmentation {seg0.shape} differ")
    score0, grad, _ = verifier_score_grad(rec, img0, seg0, cfg)
    v0 = verdict(score0, th).label
    result = AttackResult(img0.copy(), seg0.copy(), score0, score0, v0, v0, [score0], score0)
    if "segmentation" in spec.channels:
        result.notes.append("segmentation channel: zero gradient through binarisation; left unchanged")
    if spec.iters == 0 or spec.epsilon == 0 or "image" not in spec.channels:
        return result

    lo, hi = spec.clip
    x = img0.copy()
    for it in range(spec.iters):
        if not np.all(np.isfinite(grad)):
            result.notes.append(f"iteration {it}: non-finite gradient, step skipped")
            break
        if not np.any(grad):
            result.notes.append(f"iteration {it}: zero gradient, step skipped")
            break
        x = fgsm_step(x, grad, spec.step_size, spec.clip)
        x = np.clip(np.clip(x, img0 - spec.epsilon, img0 + spec.epsilon), lo, hi)
        score, grad, _ = verifier_score_grad(rec, x, seg0, cfg)
        result.trajectory.append(score)
        if verdict(score, th).label is Label.ACCEPT:
            result.ever_accepted = True
    result.image = x
    result.score_after = result.trajectory[-1]
    result.best_score = max(result.trajectory)
    result.verdict_after = verdict(result.score_after, th).label
    return result
