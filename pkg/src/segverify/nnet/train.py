"""Training loops and inference entry points for the three networks."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ModelError, ParamError, ShapeError, TrainingError
from ..imagecore import as_image, as_mask
from ..ssim import SsimConfig
from . import layers as L
from .losses import as_op, bce_logit_loss, mae_loss, mse_loss, ssim_recon_loss
from .models import DiscModel, RecModel, RegModel
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 16
    steps: int = 1000
    gan_weight: float = 0.01
    recon: str = "ssim"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    log_every: int = 50

    def __post_init__(self):
        if self.lr <= 0:
            raise ParamError("learning rate must be positive")
        if self.gan_weight < 0:
            raise ParamError("GAN loss weight must be non-negative")
        if self.recon not in ("mae", "ssim"):
            raise ParamError(f"unknown reconstruction loss {self.recon!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ParamError("batch_size must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    adv: list = field(default_factory=list)
    disc: list = field(default_factory=list)

    def window_means(self, width: int) -> list[float]:
        r = np.asarray(self.recon)
        return [float(r[i:i + width].mean()) for i in range(0, len(r), width)]


def _finite(value: float, what: str, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"{what} became non-finite at step {step}")


def _grads(leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in leaves.items()}


def train_recnet(dataset, cfg: TrainConfig, ssim_cfg: SsimConfig = SsimConfig(),
                 channels=(16, 32, 64)) -> RecModel:
    """Alternate discriminator and generator updates (pix2pix scheme).

    ``dataset`` is ``(inputs, targets)`` with inputs shaped (N, 2, h, w)
    (masked image, strip mask) and targets (N, 1, h, w).  The generator loss is
    ``gan_weight * adversarial + reconstruction``.  The per-step loss curve is
    attached to the returned model as ``model.history``.
    """
    inputs, targets = (np.asarray(a, dtype=np.float64) for a in dataset)
    if inputs.shape[0] == 0:
        raise ParamError("empty training set")
    if inputs.ndim != 4 or targets.shape != (inputs.shape[0], 1) + inputs.shape[2:]:
        raise ShapeError(f"inputs {inputs.shape} and targets {targets.shape} do not pair up")
    gen = RecModel(channels=channels, in_channels=inputs.shape[1], seed=cfg.seed)
    disc = DiscModel(in_channels=inputs.shape[1] + 1, patch=inputs.shape[2], seed=cfg.seed + 1)
    history = TrainLog()
    gen.history = history
    if cfg.steps == 0:
        return gen

    rng = np.random.default_rng(cfg.seed + 2)
    g_opt = Adam(gen.params, cfg.lr, (cfg.beta1, cfg.beta2))
    d_opt = Adam(disc.params, cfg.lr, (cfg.beta1, cfg.beta2))
    use_gan = cfg.gan_weight > 0
    n = inputs.shape[0]
    for step in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        x, y = inputs[idx], targets[idx]
        xt = Tensor(x)

        g_leaves = gen.leaves()
        fake = gen.forward(xt, g_leaves)

        d_loss_value = 0.0
        if use_gan:
            d_leaves = disc.leaves()
            real_logit = disc.forward(Tensor(np.concatenate([y, x], axis=1)), d_leaves)
            fake_logit = disc.forward(Tensor(np.concatenate([fake.values, x], axis=1)), d_leaves)
            d_loss = L.scale_add([(0.5, as_op(bce_logit_loss, real_logit, np.ones_like(real_logit.values))),
                                  (0.5, as_op(bce_logit_loss, fake_logit, np.zeros_like(fake_logit.values)))])
            d_loss_value = float(d_loss.values)
            _finite(d_loss_value, "discriminator loss", step)
            d_loss.backward()
            d_opt.step(_grads(d_leaves))

        if cfg.recon == "mae":
            recon = as_op(mae_loss, fake, y)
        else:
            recon = as_op(ssim_recon_loss, fake, y, cfg=ssim_cfg)
        terms = [(1.0, recon)]
        adv_value = 0.0
        if use_gan:
            frozen = disc.leaves(requires_grad=False)
            logit = disc.forward(L.concat([fake, xt]), frozen)
            adv = as_op(bce_logit_loss, logit, np.ones_like(logit.values))
            adv_value = float(adv.values)
            terms.append((cfg.gan_weight, adv))
        total = L.scale_add(terms)
        _finite(float(total.values), "generator loss", step)
        total.backward()
        g_opt.step(_grads(g_leaves))

        history.steps.append(step)
        history.recon.append(float(recon.values))
        history.adv.append(adv_value)
        history.disc.append(d_loss_value)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info("rec step %d recon=%.5f adv=%.4f disc=%.4f", step, recon.values, adv_value, d_loss_value)

    gen.check_finite()
    gen.round_to_float32()
    return gen


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt(np.sum(da * da) * np.sum(db * db))
    return float(np.sum(da * db) / denom) if denom > 0 else 0.0


def train_regnet(dataset, cfg: TrainConfig, heldout=None, channels=(8, 16, 32, 32)) -> RegModel:
    """MSE regression of reference DSC from (image, segmentation) inputs.

    ``dataset`` is ``(inputs (N, 2, S, S), dsc (N,))``.  When ``heldout`` is
    given, its Pearson correlation is stored as ``model.heldout_pearson``.
    """
    inputs, dsc = (np.asarray(a, dtype=np.float64) for a in dataset)
    if inputs.shape[0] == 0:
        raise ParamError("empty training set")
    if inputs.ndim != 4 or dsc.shape != (inputs.shape[0],):
        raise ShapeError(f"inputs {inputs.shape} and targets {dsc.shape} do not pair up")
    model = RegModel(size=inputs.shape[2], channels=channels, in_channels=inputs.shape[1], seed=cfg.seed)
    history = TrainLog()
    model.history = history
    if cfg.steps > 0:
        rng = np.random.default_rng(cfg.seed + 2)
        opt = Adam(model.params, cfg.lr, (cfg.beta1, cfg.beta2))
        n = inputs.shape[0]
        for step in range(cfg.steps):
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            leaves = model.leaves()
            pred = model.forward(Tensor(inputs[idx]), leaves)
            loss = as_op(mse_loss, pred, dsc[idx, None])
            _finite(float(loss.values), "regression loss", step)
            loss.backward()
            opt.step(_grads(leaves))
            history.steps.append(step)
            history.recon.append(float(loss.values))
            if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                log.info("reg step %d mse=%.5f", step, loss.values)
        model.check_finite()
        model.round_to_float32()
    if heldout is not None:
        hx, hy = heldout
        model.heldout_pearson = pearson(predict_batch(model, hx), hy)
        log.info("reg held-out pearson r=%.4f", model.heldout_pearson)
    return model


def predict_batch(model: RegModel, inputs, batch: int = 64) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    out = [model(inputs[i:i + batch])[:, 0] for i in range(0, inputs.shape[0], batch)]
    return np.concatenate(out) if out else np.zeros(0)


def _usable(model) -> None:
    if model is None:
        raise ModelError("no model supplied")
    model.check_finite()


def predict_dsc(model: RegModel, img, seg) -> float:
    _usable(model)
    img, seg = as_image(img), as_mask(seg)
    if img.shape != seg.shape:
        raise ShapeError(f"image {img.shape} and segmentation {seg.shape} differ")
    x = np.stack([img, seg.astype(np.float64)])[None]
    return float(model(x)[0, 0])


def generate(model: RecModel, masked, strip) -> np.ndarray:
    """Reconstruct one patch (or a stack of patches) from masked image + strip mask."""
    _usable(model)
    masked = np.asarray(masked, dtype=np.float64)
    strip = np.asarray(strip, dtype=np.float64)
    if masked.shape != strip.shape:
        raise ShapeError(f"masked image {masked.shape} and strip {strip.shape} differ")
    single = masked.ndim == 2
    x = np.stack([masked, strip], axis=-3)
    if single:
        x = x[None]
    out = np.clip(model(x)[:, 0], 0.0, 1.0)
    return out[0] if single else out
