"""Checkpoint directories: ``manifest.json`` plus one raw little-endian f32 file per tensor."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Missing, truncated or incompatible checkpoint."""


def _filename(key):
    return key.replace("/", "_") + ".f32"


def save_checkpoint(path, modules, manifest):
    """Write ``{prefix: nn.Module}`` parameters and a JSON manifest."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    tensors = {}
    for prefix, module in modules.items():
        for key, value in module.state_dict().items():
            full = f"{prefix}.{key}"
            arr = value.detach().cpu().numpy().astype("<f4")
            arr.tofile(path / "params" / _filename(full))
            tensors[full] = list(arr.shape)
    body = dict(manifest)
    body["version"] = CHECKPOINT_VERSION
    body["tensors"] = tensors
    (path / "manifest.json").write_text(json.dumps(body, indent=2), encoding="utf-8")
    return path


def read_manifest(path):
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    return manifest


def load_into(path, modules, manifest=None):
    """Fill ``{prefix: nn.Module}`` from a checkpoint written by save_checkpoint."""
    path = Path(path)
    manifest = manifest or read_manifest(path)
    tensors = manifest["tensors"]
    for prefix, module in modules.items():
        state = {}
        for key, ref in module.state_dict().items():
            full = f"{prefix}.{key}"
            if full not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {full}")
            shape = tuple(tensors[full])
            if shape != tuple(ref.shape):
                raise CheckpointError(f"tensor {full}: checkpoint shape {shape} != model shape {tuple(ref.shape)}")
            data = np.fromfile(path / "params" / _filename(full), dtype="<f4")
            if data.size != int(np.prod(shape)):
                raise CheckpointError(f"truncated tensor {full}")
            state[key] = torch.from_numpy(data.reshape(shape).copy()).to(ref.dtype)
        module.load_state_dict(state)
    return manifest
