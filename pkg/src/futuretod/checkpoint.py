"""Checkpoint directories: ``manifest.json`` plus ``params.bin`` of little-endian float32."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn

FORMAT = "futuretod-checkpoint/1"
MANIFEST = "manifest.json"
PARAMS = "params.bin"
VOCAB = "vocab.json"

_LE_F32 = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


def _tensors(source: nn.Module | Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    if isinstance(source, nn.Module):
        return dict(source.named_parameters())
    return dict(source)


def params_hash(source: nn.Module | Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over names, shapes and float32 bytes, in registration order."""
    h = hashlib.sha256()
    for name, t in _tensors(source).items():
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().numpy().astype(_LE_F32).tobytes())
    return h.hexdigest()


def save_checkpoint(
    directory: str | Path,
    source: nn.Module | Mapping[str, torch.Tensor],
    config: Mapping[str, Any],
    epoch: int = 0,
    extra: Mapping[str, Any] | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with (directory / PARAMS).open("wb") as fh:
        for name, t in _tensors(source).items():
            data = t.detach().cpu().numpy().astype(_LE_F32).tobytes()
            fh.write(data)
            entries.append({"name": name, "shape": list(t.shape), "dtype": "float32",
                            "offset": offset, "nbytes": len(data)})
            offset += len(data)
    manifest = {"format": FORMAT, "byte_order": "little", "tensors": entries,
                "config": dict(config), "epoch": int(epoch), **dict(extra or {})}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def read_manifest(directory: str | Path) -> dict[str, Any]:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"no {MANIFEST} in {directory}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {manifest.get('format')!r}")
    return manifest


def load_tensors(directory: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    blob = (directory / PARAMS).read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{directory}: tensor {e['name']} runs past end of {PARAMS}")
        arr = np.frombuffer(blob[e["offset"]:end], dtype=_LE_F32).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest


def load_into(model: nn.Module, directory: str | Path) -> dict[str, Any]:
    tensors, manifest = load_tensors(directory)
    own = dict(model.named_parameters())
    if set(own) != set(tensors):
        missing, unexpected = sorted(set(own) - set(tensors)), sorted(set(tensors) - set(own))
        raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={unexpected}")
    with torch.no_grad():
        for name, p in own.items():
            if tuple(p.shape) != tuple(tensors[name].shape):
                raise CheckpointError(f"shape mismatch for {name}")
            p.copy_(tensors[name])
    return manifest
