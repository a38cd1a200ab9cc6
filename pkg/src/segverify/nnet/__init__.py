"""Reverse-mode autodiff engine and the desk-scale networks."""

from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (concat, conv2d, conv2d_backward, conv2d_forward, flatten, leaky_relu,
                     linear, sigmoid, upsample2x)
from .losses import bce_logit_loss, mae_loss, mse_loss, ssim_recon_loss
from .models import DiscModel, RecModel, RegModel
from .optim import Adam
from .tensor import Tensor, leaf
from .train import (TrainConfig, generate, pearson, predict_batch, predict_dsc, train_recnet,
                    train_regnet)

__all__ = [
    "Adam", "DiscModel", "RecModel", "RegModel", "Tensor", "TrainConfig",
    "bce_logit_loss", "concat", "conv2d", "conv2d_backward", "conv2d_forward", "flatten",
    "generate", "leaf", "leaky_relu", "linear", "load_checkpoint", "mae_loss", "mse_loss",
    "pearson", "predict_batch", "predict_dsc", "save_checkpoint", "sigmoid", "ssim_recon_loss",
    "train_recnet", "train_regnet", "upsample2x",
]
