"""Desk-scale networks: U-Net-style generator, conditional patch discriminator,
and the (image, segmentation) -> DSC regressor."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..errors import ModelError, ShapeError
from . import layers as L
from .tensor import Tensor


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / ((1.0 + L.LEAK ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Named float64 parameters plus a forward pass built from :mod:`layers`.

    Parameter values are kept exactly representable in float32 so that a
    checkpoint round trip is lossless.
    """

    kind = "model"

    def __init__(self, **config):
        self.config = dict(config)
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()

    def _conv(self, rng, name, cin, cout, k):
        self.params[f"{name}.w"] = _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)
        self.params[f"{name}.b"] = np.zeros(cout)

    def _linear(self, rng, name, fin, fout):
        self.params[f"{name}.w"] = _kaiming_uniform(rng, (fin, fout), fin)
        self.params[f"{name}.b"] = np.zeros(fout)

    def round_to_float32(self) -> None:
        for k, v in self.params.items():
            self.params[k] = v.astype(np.float32).astype(np.float64)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def leaves(self, requires_grad=True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def check_finite(self) -> None:
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ModelError(f"parameter {k} is not finite")

    def copy(self):
        clone = type(self).__new__(type(self))
        clone.config = dict(self.config)
        clone.params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        return clone

    def forward(self, x: Tensor, p: dict[str, Tensor] | None = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(x), self.leaves(requires_grad=False)).values


def _conv(x, p, name, stride=1, pad=1):
    return L.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride, pad)


class RecModel(Model):
    """Three-level encoder/decoder with skip connections.

    Input channels: masked image and strip mask.  A final 1x1 convolution sees
    the decoder features together with the raw input channels.
    """

    kind = "rec"

    def __init__(self, channels=(16, 32, 64), in_channels=2, seed=0):
        super().__init__(channels=list(channels), in_channels=in_channels, seed=seed)
        c1, c2, c3 = channels
        rng = np.random.default_rng(seed)
        self._conv(rng, "enc1", in_channels, c1, 3)
        self._conv(rng, "enc2", c1, c2, 3)
        self._conv(rng, "enc3", c2, c3, 3)
        self._conv(rng, "dec2", c3 + c2, c2, 3)
        self._conv(rng, "dec1", c2 + c1, c1, 3)
        self._conv(rng, "out", c1 + in_channels, 1, 1)
        self.round_to_float32()

    def forward(self, x, p=None):
        p = p or self.leaves(requires_grad=False)
        if x.values.ndim != 4 or x.shape[1] != self.config["in_channels"]:
            raise ShapeError(f"generator input must be (N, {self.config['in_channels']}, H, W), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError("generator patch sides must be divisible by 4")
        e1 = L.leaky_relu(_conv(x, p, "enc1"))
        e2 = L.leaky_relu(_conv(e1, p, "enc2", stride=2))
        e3 = L.leaky_relu(_conv(e2, p, "enc3", stride=2))
        d2 = L.leaky_relu(_conv(L.concat([L.upsample2x(e3), e2]), p, "dec2"))
        d1 = L.leaky_relu(_conv(L.concat([L.upsample2x(d2), e1]), p, "dec1"))
        return L.sigmoid(_conv(L.concat([d1, x]), p, "out", pad=0))


class DiscModel(Model):
    """Strided-convolution classifier over (patch, conditioning channels) -> one logit."""

    kind = "disc"

    def __init__(self, in_channels=3, patch=16, channels=(16, 32), seed=0):
        super().__init__(in_channels=in_channels, patch=patch, channels=list(channels), seed=seed)
        c1, c2 = channels
        rng = np.random.default_rng(seed)
        self._conv(rng, "c1", in_channels, c1, 3)
        self._conv(rng, "c2", c1, c2, 3)
        side = patch // 4
        self._linear(rng, "fc", c2 * side * side, 1)
        self.round_to_float32()

    def forward(self, x, p=None):
        p = p or self.leaves(requires_grad=False)
        h = L.leaky_relu(_conv(x, p, "c1", stride=2))
        h = L.leaky_relu(_conv(h, p, "c2", stride=2))
        return L.linear(L.flatten(h), p["fc.w"], p["fc.b"])


class RegModel(Model):
    """Four stride-2 convolutions and a linear head squashed into [0, 1]."""

    kind = "reg"

    def __init__(self, size=64, channels=(8, 16, 32, 32), in_channels=2, seed=0):
        super().__init__(size=size, channels=list(channels), in_channels=in_channels, seed=seed)
        rng = np.random.default_rng(seed)
        prev = in_channels
        for i, c in enumerate(channels):
            self._conv(rng, f"c{i}", prev, c, 3)
            prev = c
        side = size // 2 ** len(channels)
        self._linear(rng, "fc", prev * side * side, 1)
        self.round_to_float32()

    def forward(self, x, p=None):
        p = p or self.leaves(requires_grad=False)
        size = self.config["size"]
        if x.values.ndim != 4 or x.shape[1:] != (self.config["in_channels"], size, size):
            raise ShapeError(f"regressor input must be (N, {self.config['in_channels']}, {size}, {size}), got {x.shape}")
        h = x
        for i in range(len(self.config["channels"])):
            h = L.leaky_relu(_conv(h, p, f"c{i}", stride=2))
        return L.sigmoid(L.linear(L.flatten(h), p["fc.w"], p["fc.b"]))


MODEL_KINDS = {cls.kind: cls for cls in (RecModel, DiscModel, RegModel)}
