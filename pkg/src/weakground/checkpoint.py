"""Versioned binary checkpoints: a JSON manifest followed by raw
little-endian float32 tensors in manifest order."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"WGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = list(tensors)
    manifest = {
        "version": VERSION,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<I", len(mbytes)), mbytes]
    for n in names:
        chunks.append(np.ascontiguousarray(tensors[n], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack("<I", blob[4:8])
    try:
        manifest = json.loads(blob[8:8 + mlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: bad manifest: {e}") from e
    if manifest.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    offset = 8 + mlen
    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']}")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.copy()
        offset = end
    return tensors, manifest["meta"]
