"""Portable checkpoint archives: a JSON manifest plus raw little-endian float32 tensor blobs.

Layout of the zip archive:

    manifest.json          metadata (see below)
    tensors/0000.bin       raw bytes of the first tensor, C-order, '<f4'
    tensors/0001.bin       ...

The manifest carries, under "tensors", one entry per array with its name,
shape, storage dtype (always "float32"), original dtype, and blob path; and
under "meta", caller-provided JSON (for model checkpoints: the subspace
layout as explicit index lists, the training state, the config snapshot, and
the model hyperparameters). Non-float tensors (e.g. batch-norm step counters)
are cast to float32 for storage and restored to their original dtype on load.
Writes are atomic: a temp file in the target directory is renamed over the
destination.
"""
from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

FORMAT_NAME = "dynsubspace-checkpoint"
FORMAT_VERSION = 1


def save_tensor_archive(path: str | Path, tensors: Mapping[str, torch.Tensor], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    for i, (name, t) in enumerate(tensors.items()):
        arr = t.detach().cpu().numpy()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32",
                "orig_dtype": str(arr.dtype),
                "file": f"tensors/{i:04d}.bin",
            }
        )
        blobs.append(arr.astype("<f4").tobytes(order="C"))
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tensors": entries,
        "meta": meta,
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)

    def _entry(name: str) -> zipfile.ZipInfo:
        # fixed timestamp so identical contents produce byte-identical archives
        info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
        info.compress_type = zipfile.ZIP_DEFLATED
        return info

    try:
        with zipfile.ZipFile(tmp, "w") as zf:
            zf.writestr(_entry("manifest.json"), json.dumps(manifest, indent=1))
            for entry, blob in zip(entries, blobs):
                zf.writestr(_entry(entry["file"]), blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensor_archive(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_NAME:
            raise ValueError(f"{path} is not a {FORMAT_NAME} archive")
        if manifest.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        tensors = {}
        for entry in manifest["tensors"]:
            raw = np.frombuffer(zf.read(entry["file"]), dtype="<f4").reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(raw.astype(entry["orig_dtype"]))
    return tensors, manifest["meta"]


def save_checkpoint(path: str | Path, model: torch.nn.Module, layout, state, config, model_info: dict) -> None:
    """Model checkpoint: parameters + buffers, layout, training state, config snapshot."""
    meta = {
        "kind": "embedding-model",
        "layout": layout.to_dict(),
        "state": state.to_dict() if hasattr(state, "to_dict") else dict(state),
        "config": dict(config),
        "model": dict(model_info),
    }
    save_tensor_archive(path, model.state_dict(), meta)


def load_checkpoint(path: str | Path, model: torch.nn.Module | None = None) -> tuple[dict[str, torch.Tensor], dict]:
    """Load a checkpoint; when a model is given its weights are restored in place."""
    tensors, meta = load_tensor_archive(path)
    if meta.get("kind") != "embedding-model":
        raise ValueError(f"{path} holds a {meta.get('kind')!r} archive, not an embedding model")
    if model is not None:
        model.load_state_dict(tensors)
    return tensors, meta
