"""Checkpoints: ``<stem>.json`` manifest plus ``<stem>.bin`` raw little-endian float32 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import IoError, ModelError
from .models import MODEL_KINDS, Model

DTYPE = "<f4"


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_checkpoint(model: Model, stem) -> Path:
    manifest_path, blob_path = _paths(stem)
    entries, chunks, offset = [], [], 0
    for name, arr in model.params.items():
        raw = arr.astype(DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "kind": model.kind,
        "config": model.config,
        "dtype": "float32-le",
        "blob": blob_path.name,
        "params": entries,
    }
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        blob_path.write_bytes(b"".join(chunks))
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {manifest_path}: {exc}") from exc
    return manifest_path


def load_checkpoint(stem) -> Model:
    manifest_path, blob_path = _paths(stem)
    try:
        manifest = json.loads(manifest_path.read_text())
        blob = (manifest_path.parent / manifest.get("blob", blob_path.name)).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {manifest_path}: {exc}") from exc
    cls = MODEL_KINDS.get(manifest["kind"])
    if cls is None:
        raise ModelError(f"unknown model kind {manifest['kind']!r}")
    model = cls(**manifest["config"])
    for entry in manifest["params"]:
        name = entry["name"]
        if name not in model.params:
            raise ModelError(f"checkpoint parameter {name} not in {cls.__name__}")
        arr = np.frombuffer(blob, dtype=DTYPE, count=int(np.prod(entry["shape"], dtype=int)),
                            offset=entry["offset"])
        if tuple(entry["shape"]) != model.params[name].shape:
            raise ModelError(f"shape mismatch for {name}")
        model.params[name] = arr.astype(np.float64).reshape(entry["shape"])
    model.check_finite()
    return model
