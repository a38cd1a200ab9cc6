"""Image and mask primitives.

Images are 2-D ``float64`` arrays with values in [0, 1]; masks are 2-D
``bool`` arrays.  Every function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import EmptyMaskError, IoError, ParamError, ShapeError, TilingError

__all__ = [
    "PatchGrid",
    "RoiWindow",
    "as_image",
    "as_mask",
    "dice_score",
    "boundary",
    "boundary_strip",
    "apply_strip_mask",
    "split_patches",
    "stitch_patches",
    "extract_roi",
    "crop",
    "l2_error",
    "normalize",
    "read_pgm",
    "write_image_pgm",
    "write_mask_pgm",
]

_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class PatchGrid:
    patch_h: int
    patch_w: int
    rows: int
    cols: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows * self.patch_h, self.cols * self.patch_w

    def __len__(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class RoiWindow:
    top: int
    left: int
    height: int
    width: int

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)


def as_image(img) -> np.ndarray:
    """Validate and return ``img`` as a 2-D float64 array in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"image must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParamError("image contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ParamError("image values must lie in [0, 1]")
    return arr


def as_mask(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ParamError("mask must be binary")
        arr = arr.astype(bool)
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice_score(a, b) -> float:
    """Dice overlap 2|A&B| / (|A| + |B|); two empty masks score 1.0."""
    a, b = as_mask(a), as_mask(b)
    _same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Pixels of ``mask`` with a 4-neighbour outside it (the grid exterior counts as outside)."""
    m = as_mask(mask)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def boundary_strip(mask, width: int) -> np.ndarray:
    """All pixels within Chebyshev distance ``< width`` of the mask boundary."""
    if int(width) != width or width < 1:
        raise ParamError(f"strip width must be a positive integer, got {width}")
    edge = boundary(mask)
    if not edge.any() or width == 1:
        return edge
    size = 2 * int(width) - 1
    return ndimage.binary_dilation(edge, structure=np.ones((size, size), dtype=bool))


def apply_strip_mask(img, strip) -> np.ndarray:
    img, strip = as_image(img), as_mask(strip)
    _same_shape(img, strip)
    out = img.copy()
    out[strip] = 0.0
    return out


def split_patches(img, patch_h: int, patch_w: int) -> tuple[list[np.ndarray], PatchGrid]:
    """Cut ``img`` into non-overlapping tiles, ordered row-major."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
    h, w = arr.shape
    if patch_h < 1 or patch_w < 1 or h % patch_h or w % patch_w:
        raise TilingError(f"{patch_h}x{patch_w} patches do not tile a {h}x{w} image")
    grid = PatchGrid(patch_h, patch_w, h // patch_h, w // patch_w)
    patches = [
        arr[r * patch_h:(r + 1) * patch_h, c * patch_w:(c + 1) * patch_w].copy()
        for r in range(grid.rows)
        for c in range(grid.cols)
    ]
    return patches, grid


def stitch_patches(patches, grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`split_patches`; placement follows list order."""
    patches = [np.asarray(p) for p in patches]
    if len(patches) != len(grid):
        raise TilingError(f"grid needs {len(grid)} patches, got {len(patches)}")
    for p in patches:
        if p.shape != (grid.patch_h, grid.patch_w):
            raise TilingError(f"patch shape {p.shape} does not match grid {grid.patch_h}x{grid.patch_w}")
    dtype = np.result_type(*patches) if patches else np.float64
    out = np.empty(grid.shape, dtype=dtype)
    for i, p in enumerate(patches):
        r, c = divmod(i, grid.cols)
        out[r * grid.patch_h:(r + 1) * grid.patch_h, c * grid.patch_w:(c + 1) * grid.patch_w] = p
    return out


def extract_roi(comp_a, comp_b, roi_h: int, roi_w: int) -> RoiWindow:
    """Window centred on the row midway between two stacked compartments.

    The middle row is halfway between the last row of ``comp_a`` and the first
    row of ``comp_b`` (rounded down); horizontally the window is centred on the
    joint column extent.  The window is shifted, never shrunk, to stay in bounds.
    """
    a, b = as_mask(comp_a), as_mask(comp_b)
    _same_shape(a, b)
    if not a.any() or not b.any():
        raise EmptyMaskError("both compartments must be nonempty")
    h, w = a.shape
    if not (1 <= roi_h <= h and 1 <= roi_w <= w):
        raise ParamError(f"ROI {roi_h}x{roi_w} does not fit in {h}x{w}")
    a_rows = np.flatnonzero(a.any(axis=1))
    b_rows = np.flatnonzero(b.any(axis=1))
    middle = (int(a_rows[-1]) + int(b_rows[0])) // 2
    cols = np.flatnonzero((a | b).any(axis=0))
    center_col = (int(cols[0]) + int(cols[-1])) // 2
    top = min(max(middle - roi_h // 2, 0), h - roi_h)
    left = min(max(center_col - roi_w // 2, 0), w - roi_w)
    return RoiWindow(top, left, roi_h, roi_w)


def crop(arr, roi: RoiWindow) -> np.ndarray:
    return np.asarray(arr)[roi.slices].copy()


def l2_error(a, b) -> float:
    a, b = as_image(a), as_image(b)
    _same_shape(a, b)
    return float(np.sqrt(np.sum((a - b) ** 2)))


def normalize(arr) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant array maps to zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo <= 0.0:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


# -- PGM I/O -----------------------------------------------------------------

def _write_pgm(path, data: np.ndarray, maxval: int) -> None:
    h, w = data.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(data.astype(dtype).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_image_pgm(path, img) -> None:
    """16-bit binary PGM, intensity 1.0 -> 65535."""
    img = as_image(img)
    _write_pgm(path, np.rint(img * 65535.0), 65535)


def write_mask_pgm(path, mask) -> None:
    """8-bit binary PGM with values {0, 255}."""
    _write_pgm(path, as_mask(mask).astype(np.uint8) * 255, 255)


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IoError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pgm(path, as_binary_mask: bool | None = None) -> np.ndarray:
    """Read a P5 file.

    8-bit files holding only {0, 255} come back as ``bool`` masks unless
    ``as_binary_mask`` is False; everything else becomes a float image in [0, 1].
    """
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic != b"P5":
        raise IoError(f"{path}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    if raw.size != count:
        raise IoError(f"{path}: truncated pixel data")
    raw = raw.reshape(h, w)
    binary = maxval == 255 and bool(np.all((raw == 0) | (raw == 255)))
    if as_binary_mask or (as_binary_mask is None and binary):
        return raw > (maxval // 2)
    return raw.astype(np.float64) / maxval
