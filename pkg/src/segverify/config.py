"""Run configuration: one JSON document with a section per subcommand."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .attacks import AttackSpec
from .errors import IoError, ParamError
from .nnet import TrainConfig
from .ssim import SsimConfig
from .synthdata import DEFAULT_MANIFEST
from .verify import VerifyConfig

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "data": copy.deepcopy(DEFAULT_MANIFEST),
    "pipeline": {
        "strip_width": 3,
        "patch": 16,
        "mask_channel": "segmentation",
        "ssim": {"window": 8, "stride": 8, "k1": 0.01, "k2": 0.03, "dynamic_range": 1.0},
    },
    "train_rec": {
        "lr": 1e-3, "batch_size": 16, "steps": 3000, "gan_weight": 0.01, "recon": "ssim",
        "channels": [16, 32, 64], "log_every": 100,
    },
    "train_reg": {
        "lr": 1e-3, "batch_size": 16, "steps": 3000, "channels": [8, 16, 32, 32], "log_every": 100,
        "heldout_split": "test",
    },
    "calibrate": {"split": "val", "dsc_good": 0.7, "margin": 1e-3, "recon": "ssim"},
    "verify": {"split": "test", "recon": "ssim"},
    "attack_reg": {
        "split": "test", "epsilon": 0.5, "target": "maximize-score",
        "channels": ["image", "segmentation"], "max_dsc": 0.4,
    },
    "attack_ver": {
        "split": "test", "epsilon": 0.5, "iters": 10, "step": None, "limit": 60,
        "channels": ["image", "segmentation"], "recon": "ssim",
    },
    "export": {"split": "test"},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class RunConfig:
    """Merged defaults + config file + CLI overrides."""

    def __init__(self, data: dict | None = None):
        self.data = deep_merge(DEFAULTS, data or {})
        self.data["data"]["seed"] = self.seed

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ParamError(f"config {path} is not valid JSON: {exc}") from exc

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def __getitem__(self, key):
        return self.data[key]

    def override(self, section: str, **values) -> None:
        for k, v in values.items():
            if v is not None:
                self.data[section][k] = v
        self.data["data"]["seed"] = self.seed

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def dump(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.json").write_text(self.to_json())

    # -- typed views -------------------------------------------------------------

    def verify_config(self) -> VerifyConfig:
        p = self.data["pipeline"]
        s = p["ssim"]
        ssim = SsimConfig(window=int(s["window"]), stride=int(s["stride"]), k1=float(s["k1"]),
                          k2=float(s["k2"]), dynamic_range=float(s["dynamic_range"]),
                          c3_override=s.get("c3"))
        return VerifyConfig(strip_width=int(p["strip_width"]), patch=int(p["patch"]), ssim=ssim,
                            mask_channel=p["mask_channel"])

    def train_config(self, section: str, recon: str | None = None) -> TrainConfig:
        t = self.data[section]
        return TrainConfig(lr=float(t["lr"]), batch_size=int(t["batch_size"]), steps=int(t["steps"]),
                           gan_weight=float(t.get("gan_weight", 0.0)),
                           recon=recon or t.get("recon", "mae"), seed=self.seed,
                           log_every=int(t.get("log_every", 0)))

    def attack_spec(self, section: str) -> AttackSpec:
        a = self.data[section]
        return AttackSpec(epsilon=float(a["epsilon"]), target=a.get("target", "maximize-score"),
                          channels=tuple(a["channels"]), iters=int(a.get("iters", 1)),
                          step=None if a.get("step") is None else float(a["step"]))
