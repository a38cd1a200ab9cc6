"""Deterministic synthetic stand-in for knee-MRI cartilage ROIs.

Each scene holds two stacked, gently curved horizontal bands (the upper and
lower compartment) separated by a thin dark gap, over a smoothly textured
background.  Scenes are drawn on a taller canvas and cropped to the ROI
centred on the inter-compartment gap.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CorruptionError, EmptyMaskError, GenError, IoError, ParamError
from .imagecore import (as_mask, crop, dice_score, extract_roi, read_pgm, write_image_pgm,
                        write_mask_pgm)

MODES = ("dilate", "erode", "shift", "warp", "drop-region")
# Pure omissions (drop-region) leave no boundary to mask, so the strip-based
# verifier cannot see them; default datasets draw from boundary-displacing modes.
DEFAULT_MODES = ("dilate", "erode", "shift", "warp")
DSC_TOLERANCE = 0.05
_MAX_MAGNITUDE = {"dilate": 40.0, "erode": 20.0, "shift": 40.0, "warp": 30.0, "drop-region": 100.0}


@dataclass(frozen=True)
class SceneParams:
    size: tuple = (64, 64)
    canvas_margin: int = 32
    thickness: tuple = (6.0, 12.0)
    gap: tuple = (2.0, 4.0)
    curve_amplitude: tuple = (1.0, 6.0)
    curve_period: tuple = (48.0, 160.0)
    band_levels: tuple = ((0.70, 0.85), (0.60, 0.75))
    background_level: tuple = (0.25, 0.40)
    gap_level: float = 0.08
    texture_amplitude: float = 0.08
    contrast: tuple = (1.0, 1.0)  # optional scan-to-scan gain range; off by default
    noise_std: float = 0.02
    edge_blur: float = 0.6
    min_area: int = 40
    retries: int = 20
    seed: int = 0

    def with_seed(self, seed: int) -> "SceneParams":
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class CorruptionSpec:
    mode: str = "dilate"
    target_dsc: float = 0.7
    seed: int = 0
    magnitude: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParamError(f"unknown corruption mode {self.mode!r}")
        if not 0.0 < self.target_dsc <= 1.0:
            raise ParamError("target_dsc must lie in (0, 1]")


@dataclass
class Sample:
    image: np.ndarray
    comp_a: np.ndarray
    comp_b: np.ndarray

    @property
    def reference(self) -> np.ndarray:
        return self.comp_a | self.comp_b


def _smooth_noise(rng: np.random.Generator, shape, sigmas=(6.0, 2.5), weights=(0.7, 0.3)) -> np.ndarray:
    total = np.zeros(shape)
    for s, wt in zip(sigmas, weights):
        field_ = ndimage.gaussian_filter(rng.standard_normal(shape), s, mode="wrap")
        total += wt * field_ / (np.abs(field_).max() + 1e-12)
    return total


def _draw(params: SceneParams, rng: np.random.Generator) -> Sample:
    h, w = params.size
    ch = h + params.canvas_margin
    rows = np.arange(ch, dtype=np.float64)[:, None] + 0.5
    cols = np.arange(w, dtype=np.float64)[None, :] + 0.5

    amp = rng.uniform(*params.curve_amplitude)
    period = rng.uniform(*params.curve_period)
    phase = rng.uniform(0, 2 * math.pi)
    gap = rng.uniform(*params.gap)
    t_a = rng.uniform(*params.thickness)
    t_b = rng.uniform(*params.thickness)
    wobble_a = rng.uniform(0, 1.5) * np.sin(2 * math.pi * cols / rng.uniform(30, 90) + rng.uniform(0, 6.3))
    wobble_b = rng.uniform(0, 1.5) * np.sin(2 * math.pi * cols / rng.uniform(30, 90) + rng.uniform(0, 6.3))
    lo = t_a + gap + amp + 4
    hi = ch - t_b - gap - amp - 4
    center = rng.uniform(lo, hi) + amp * np.sin(2 * math.pi * cols / period + phase)

    a_bottom = center - gap / 2
    b_top = center + gap / 2
    comp_a = (rows >= a_bottom - (t_a + wobble_a)) & (rows < a_bottom)
    comp_b = (rows >= b_top) & (rows < b_top + t_b + wobble_b)

    bg = rng.uniform(*params.background_level)
    level_a = rng.uniform(*params.band_levels[0])
    level_b = rng.uniform(*params.band_levels[1])
    base = np.full((ch, w), bg)
    gap_zone = (rows >= a_bottom) & (rows < b_top)
    base[gap_zone] = params.gap_level
    base[comp_a] = level_a
    base[comp_b] = level_b
    base = ndimage.gaussian_filter(base, params.edge_blur, mode="nearest")
    texture = params.texture_amplitude * _smooth_noise(rng, (ch, w))
    gain = rng.uniform(*params.contrast)
    img = 0.5 + gain * (base + texture - 0.5) + rng.normal(0.0, params.noise_std, size=(ch, w))
    img = np.clip(img, 0.0, 1.0)
    img = np.rint(img * 65535.0) / 65535.0

    roi = extract_roi(comp_a, comp_b, h, w)
    return Sample(crop(img, roi), crop(comp_a, roi), crop(comp_b, roi))


def gen_sample(params: SceneParams) -> Sample:
    """Deterministic scene for ``params.seed``; retried until the geometry is valid."""
    rng = np.random.default_rng(params.seed)
    for _ in range(params.retries):
        try:
            s = _draw(params, rng)
        except EmptyMaskError:
            continue
        if (s.comp_a & s.comp_b).any():
            continue
        if s.comp_a.sum() < params.min_area or s.comp_b.sum() < params.min_area:
            continue
        if s.image.std() <= 0.02:
            continue
        return s
    raise GenError(f"no valid scene for seed {params.seed} after {params.retries} attempts")


# -- corruption -------------------------------------------------------------------

def _apply(mask: np.ndarray, mode: str, magnitude: float, rng_seed: int) -> np.ndarray:
    if magnitude <= 0:
        return mask.copy()
    if mode == "dilate":
        return mask | (ndimage.distance_transform_edt(~mask) <= magnitude)
    if mode == "erode":
        return mask & (ndimage.distance_transform_edt(mask) > magnitude)
    rng = np.random.default_rng(rng_seed)
    h, w = mask.shape
    if mode == "shift":
        theta = rng.uniform(0, 2 * math.pi)
        moved = ndimage.shift(mask.astype(np.float64), (magnitude * math.sin(theta), magnitude * math.cos(theta)),
                              order=1, mode="constant")
        return moved > 0.5
    if mode == "warp":
        dy = _smooth_noise(rng, (h, w), sigmas=(8.0,), weights=(1.0,))
        dx = _smooth_noise(rng, (h, w), sigmas=(8.0,), weights=(1.0,))
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        warped = ndimage.map_coordinates(mask.astype(np.float64),
                                         [rr + magnitude * dy, cc + magnitude * dx], order=1, mode="constant")
        return warped > 0.5
    # drop-region: remove a disc grown around a seeded foreground pixel
    ys, xs = np.nonzero(mask)
    k = rng.integers(len(ys))
    rr, cc = np.mgrid[0:h, 0:w]
    return mask & ((rr - ys[k]) ** 2 + (cc - xs[k]) ** 2 > magnitude ** 2)


def corrupt(mask, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt ``mask`` so its Dice against the original lands within 0.05 of the target.

    The magnitude is found by a coarse scan followed by bisection on the first
    bracket that crosses the target.  Raises :class:`CorruptionError` when the
    mode cannot reach the target.
    """
    mask = as_mask(mask)
    if not mask.any():
        raise EmptyMaskError("cannot corrupt an empty mask")
    if spec.target_dsc >= 1.0:
        return mask.copy()
    if spec.magnitude is not None:
        return _apply(mask, spec.mode, spec.magnitude, spec.seed)

    def dsc_at(m):
        return dice_score(_apply(mask, spec.mode, m, spec.seed), mask)

    target = spec.target_dsc
    grid = np.linspace(0.0, _MAX_MAGNITUDE[spec.mode], 81)
    values = [1.0]
    best_m, best_err = 0.0, abs(1.0 - target)
    for lo_m, hi_m in zip(grid[:-1], grid[1:]):
        d_hi = dsc_at(hi_m)
        values.append(d_hi)
        if abs(d_hi - target) < best_err:
            best_m, best_err = hi_m, abs(d_hi - target)
        if (values[-2] - target) * (d_hi - target) <= 0:
            a, b = lo_m, hi_m
            for _ in range(30):
                mid = 0.5 * (a + b)
                d_mid = dsc_at(mid)
                if abs(d_mid - target) < best_err:
                    best_m, best_err = mid, abs(d_mid - target)
                if (d_mid - target) * (values[-2] - target) > 0:
                    a = mid
                else:
                    b = mid
            break
    if best_err > DSC_TOLERANCE:
        raise CorruptionError(f"{spec.mode} cannot reach DSC {target:.3f} (closest error {best_err:.3f})")
    return _apply(mask, spec.mode, best_m, spec.seed)


# -- on-disk datasets ----------------------------------------------------------------

DEFAULT_MANIFEST = {
    "seed": 0,
    "scene": {},
    "dsc_range": [0.2, 1.0],
    "clean_fraction": 0.1,
    "modes": list(DEFAULT_MODES),
    "splits": {
        "train": {"count": 80, "corrupt": False},
        "regtrain": {"count": 400, "corrupt": True},
        "val": {"count": 160, "corrupt": True},
        "test": {"count": 160, "corrupt": True},
    },
}


def _scene_from(manifest: dict) -> SceneParams:
    scene = dict(manifest.get("scene", {}))
    for key in ("size", "thickness", "gap", "curve_amplitude", "curve_period", "background_level", "contrast"):
        if key in scene:
            scene[key] = tuple(scene[key])
    if "band_levels" in scene:
        scene["band_levels"] = tuple(tuple(x) for x in scene["band_levels"])
    return SceneParams(**scene)


def _targets(rng: np.random.Generator, count: int, lo: float, hi: float, clean_fraction: float) -> list[float]:
    """Stratified DSC targets over [lo, hi] plus a share of untouched masks."""
    n_clean = int(round(count * clean_fraction))
    n = count - n_clean
    edges = lo + (hi - lo) * (np.arange(n) + rng.uniform(0, 1, size=n)) / max(n, 1)
    targets = [float(t) for t in edges] + [1.0] * n_clean
    order = rng.permutation(len(targets))
    return [targets[i] for i in order]


def make_record(params: SceneParams, sample_seed: int, target: float, rng: np.random.Generator,
                modes=DEFAULT_MODES):
    """Generate one scene and a corrupted segmentation; returns (sample, seg, entry)."""
    sample = gen_sample(params.with_seed(sample_seed))
    ref = sample.reference
    if target >= 1.0:
        return sample, ref.copy(), {"mode": None, "target_dsc": 1.0, "seed": None}
    for mode in rng.permutation(list(modes)):
        spec = CorruptionSpec(mode=str(mode), target_dsc=target, seed=int(rng.integers(2 ** 31)))
        try:
            seg = corrupt(ref, spec)
        except CorruptionError:
            continue
        return sample, seg, {"mode": spec.mode, "target_dsc": target, "seed": spec.seed}
    raise CorruptionError(f"no mode reaches DSC {target:.3f} for scene seed {sample_seed}")


def build_dataset(manifest: dict, root) -> dict:
    """Write ``<root>/<split>/{img,ref,seg}/NNNN.pgm`` plus per-split ``index.json``."""
    root = Path(root)
    params = _scene_from(manifest)
    lo, hi = manifest.get("dsc_range", [0.2, 1.0])
    clean = float(manifest.get("clean_fraction", 0.1))
    modes = tuple(manifest.get("modes", DEFAULT_MODES))
    unknown = set(modes) - set(MODES)
    if unknown or not modes:
        raise ParamError(f"bad corruption modes {sorted(unknown) or modes}")
    base_seed = int(manifest.get("seed", 0))
    summary = {}
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        for split_no, (split, conf) in enumerate(manifest["splits"].items()):
            count = int(conf["count"])
            corrupt_split = bool(conf.get("corrupt", True))
            ss = np.random.SeedSequence([base_seed, split_no])
            rng = np.random.default_rng(ss)
            targets = _targets(rng, count, lo, hi, clean) if corrupt_split else [1.0] * count
            for sub in ("img", "ref", "seg"):
                (root / split / sub).mkdir(parents=True, exist_ok=True)
            entries = []
            scene_seed = int(rng.integers(2 ** 31))
            for i, target in enumerate(targets):
                while True:
                    try:
                        sample, seg, corr = make_record(params, scene_seed, target, rng, modes)
                        break
                    except (CorruptionError, GenError):
                        scene_seed += 1
                name = f"{i:04d}.pgm"
                write_image_pgm(root / split / "img" / name, sample.image)
                write_mask_pgm(root / split / "ref" / name, sample.reference)
                write_mask_pgm(root / split / "seg" / name, seg)
                entries.append({
                    "id": f"{split}-{i:04d}",
                    "file": name,
                    "scene_seed": scene_seed,
                    "reference_dsc": dice_score(seg, sample.reference),
                    "corrupted": corr["mode"] is not None,
                    "corruption": corr,
                })
                scene_seed += 1
            (root / split / "index.json").write_text(
                json.dumps({"split": split, "samples": entries}, indent=2, sort_keys=True) + "\n")
            summary[split] = len(entries)
    except OSError as exc:
        raise IoError(f"dataset write failed under {root}: {exc}") from exc
    return summary


@dataclass
class Record:
    id: str
    image: np.ndarray
    reference: np.ndarray
    seg: np.ndarray
    reference_dsc: float
    corrupted: bool
    meta: dict = field(default_factory=dict)


def load_split(root, split: str) -> list[Record]:
    base = Path(root) / split
    try:
        index = json.loads((base / "index.json").read_text())
    except OSError as exc:
        raise IoError(f"missing split index {base / 'index.json'}: {exc}") from exc
    out = []
    for e in index["samples"]:
        out.append(Record(
            id=e["id"],
            image=read_pgm(base / "img" / e["file"], as_binary_mask=False),
            reference=read_pgm(base / "ref" / e["file"], as_binary_mask=True),
            seg=read_pgm(base / "seg" / e["file"], as_binary_mask=True),
            reference_dsc=float(e["reference_dsc"]),
            corrupted=bool(e["corrupted"]),
            meta=e,
        ))
    return out


def scene_params_dict(params: SceneParams) -> dict:
    return asdict(params)
