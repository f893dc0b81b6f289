"""Checkpoint container: one JSON manifest line, then a float32 payload.

The manifest lists every tensor (name, role, shape) in payload order, so a
file can be decoded without knowing the network that produced it.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = "canalseg-checkpoint/1"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, meta: dict, tensors: list[tuple[str, str, np.ndarray]]) -> None:
    entries, chunks = [], []
    for name, role, arr in tensors:
        a = np.asarray(arr, dtype="<f4")
        entries.append({"name": name, "role": role, "shape": list(a.shape)})
        chunks.append(a.tobytes(order="C"))
    manifest = {"format": MAGIC, **meta, "tensors": entries}
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for c in chunks:
            f.write(c)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad manifest: {exc}") from exc
    if manifest.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint ({manifest.get('format')!r})")
    payload = memoryview(raw)[nl + 1:]
    out, offset = {}, 0
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 4 * n
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4")
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return manifest, out
