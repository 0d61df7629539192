"""Checkpoint directory: ``manifest.json`` plus one raw little-endian data file."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from vita.encoder import ModelConfig, VitaModel

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
DATA_FILE = "tensors.bin"

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def save_checkpoint(model: VitaModel, path: str | Path, config: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path / DATA_FILE, "wb") as fh:
        for name, tensor in model.state_dict().items():
            if tensor.dtype not in _DTYPES:
                raise TypeError(f"{name}: unsupported dtype {tensor.dtype}")
            dtype = _DTYPES[tensor.dtype]
            buf = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=dtype).tobytes()
            fh.write(buf)
            entries.append({"name": name, "shape": list(tensor.shape), "dtype": dtype, "offset": offset, "nbytes": len(buf)})
            offset += len(buf)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": model.cfg.to_dict(),
        "config": config or {},
        "extra": extra or {},
        "data_file": DATA_FILE,
        "tensors": entries,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path: str | Path) -> dict:
    manifest = json.loads((Path(path) / MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {manifest.get('format_version')}")
    return manifest


def load_checkpoint(path: str | Path, dtype=None) -> tuple[VitaModel, dict]:
    """Rebuild the model; returns ``(model, manifest)``."""
    path = Path(path)
    manifest = read_manifest(path)
    raw = (path / manifest["data_file"]).read_bytes()
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    model = VitaModel(ModelConfig.from_dict(manifest["model"]))
    if dtype is not None:
        model = model.to(dtype)
        state = {k: v.to(dtype) for k, v in state.items()}
    else:
        model = model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state, strict=True)
    return model, manifest
