"""Checkpoint archives.

A checkpoint is an uncompressed zip holding three members:

``manifest.json``
    UTF-8 JSON: format tag, model config (variant, dims, seed) and free-form
    extras such as the epoch.
``index.json``
    ``[{name, shape, offset, count}]`` where ``offset``/``count`` are in
    float32 elements into the blob.
``params.bin``
    All parameter arrays concatenated as little-endian float32.

Member timestamps are fixed so identical weights give identical bytes.
"""

from __future__ import annotations

import json
import math
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import DataFormatError

FORMAT = "hybridstereo-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def save_checkpoint(model, path, arrays: dict | None = None, extra: dict | None = None) -> Path:
    """Write ``model``'s tensors (or explicit ``arrays``) to ``path``.

    Args:
        model: Module whose ``state_dict`` is saved; its ``config`` (if any)
            goes into the manifest.
        path: Output file.
        arrays: Optional ``{name: array}`` overriding the saved values, used to
            store historical snapshots without touching the model.
        extra: Additional JSON-serializable manifest entries.
    """
    path = Path(path)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if arrays:
        for name, value in arrays.items():
            if name not in state:
                raise KeyError(f"{name} is not a tensor of the model")
            state[name] = np.asarray(value)
    index, blobs, offset = [], [], 0
    for name, value in state.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.reshape(-1).tobytes())
        offset += int(arr.size)
    config = getattr(model, "config", None)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": config.to_dict() if config is not None else None,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
        _write_member(zf, "index.json", json.dumps(index).encode("utf-8"))
        _write_member(zf, "params.bin", b"".join(blobs))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return the manifest and ``{name: float32 array}`` without building a model."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
            index = json.loads(zf.read("index.json").decode("utf-8"))
            blob = zf.read("params.bin")
    except (zipfile.BadZipFile, KeyError) as exc:
        raise DataFormatError(f"{path}: not a checkpoint archive ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise DataFormatError(f"{path}: unexpected format tag {manifest.get('format')!r}")
    flat = np.frombuffer(blob, dtype="<f4")
    arrays = {}
    for entry in index:
        start, count = entry["offset"], entry["count"]
        if start + count > flat.size or count != math.prod(entry["shape"]):
            raise DataFormatError(f"{path}: index entry {entry['name']} out of range", offset=4 * start)
        arrays[entry["name"]] = flat[start : start + count].reshape(entry["shape"]).astype(np.float32)
    return manifest, arrays


def load_state(model, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)


def load_checkpoint(path):
    """Rebuild the model described by the manifest and load its weights.

    Returns:
        ``(model, manifest)``.
    """
    from .networks import ModelConfig, StereoModel

    manifest, arrays = read_checkpoint(path)
    if manifest.get("model_config") is None:
        raise DataFormatError(f"{path}: checkpoint carries no model config")
    model = StereoModel(ModelConfig.from_dict(manifest["model_config"]))
    load_state(model, arrays)
    model.eval()
    return model, manifest
