"""Checkpoint persistence: JSON manifest + one little-endian float32 blob.

The manifest records name/shape/offset per parameter and a SHA-256 of the
blob, so a flipped byte or truncation fails loudly instead of loading.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


def model_state(model):
    """Named parameter arrays (float32, detached) of a torch module."""
    return {name: p.detach().cpu().numpy().astype("<f4") for name, p in model.named_parameters()}


def load_into_model(model, params):
    with torch.no_grad():
        own = dict(model.named_parameters())
        for name, arr in params.items():
            if name not in own:
                raise CheckpointError(f"checkpoint parameter {name} not in model")
            if tuple(own[name].shape) != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: model {tuple(own[name].shape)} vs checkpoint {arr.shape}"
                )
            own[name].copy_(torch.from_numpy(arr.copy()))
    return model


def config_hash(config_dict):
    canon = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def save_checkpoint(params, meta, path):
    """Write a parameter dict plus metadata under the directory `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(np.asarray(params[name], dtype="<f4"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "entries": entries,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    """Returns (params dict, meta dict); verifies version and blob integrity."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {version} != supported {FORMAT_VERSION}")
    blob = (path / BLOB_NAME).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob length {len(blob)} != manifest {manifest['blob_bytes']} (truncated?)")
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise CheckpointError("blob hash mismatch; checkpoint corrupt")
    params = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        params[entry["name"]] = arr.copy()
    return params, manifest["meta"]
