"""Checkpoints: ``manifest.json`` (model config, segment table, d, format
version) plus ``params.f8``, the d parameters as little-endian float64 in
segment-table order."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from dpjl.autodiff.model import Model, ParamVector

__all__ = ["FORMAT_VERSION", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1
_BLOB = "params.f8"
_MANIFEST = "manifest.json"


def save_checkpoint(directory, model: Model, params: ParamVector, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": model.config(),
        "d": params.d,
        "segments": [
            {"layer": s.layer, "name": s.name, "offset": s.offset, "length": s.length,
             "shape": list(s.shape)} for s in params.segments
        ],
        "blob": _BLOB,
        "dtype": "<f8",
    }
    if extra:
        manifest["extra"] = extra
    (directory / _BLOB).write_bytes(params.data.astype("<f8").tobytes())
    (directory / _MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> tuple[Model, ParamVector]:
    directory = Path(directory)
    manifest = json.loads((directory / _MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    model = Model.from_config(manifest["model"])
    raw = (directory / manifest["blob"]).read_bytes()
    d = int(manifest["d"])
    if len(raw) != 8 * d:
        raise ValueError(f"parameter blob has {len(raw)} bytes, expected {8 * d}")
    if d != model.d:
        raise ValueError(f"manifest d={d} does not match the model (d={model.d})")
    data = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return model, ParamVector(data, model.segments)
