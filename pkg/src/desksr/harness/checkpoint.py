"""Shared checkpoint container: JSON header + raw little-endian float32 payload.

Layout: 4-byte magic ``DSKC``, u32 header length, UTF-8 JSON header, then
the concatenated tensor payload. The header lists every tensor with name,
shape, dtype and byte offset (strictly increasing) plus a format tag and
free-form metadata. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"DSKC"
FORMAT_TAG = "desksr-checkpoint-v1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(tensors: dict, path, meta: dict | None = None) -> None:
    """Write a name -> float32 array map; names must be unique and finite."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if not np.isfinite(arr).all():
            raise CheckpointError(f"tensor {name!r} contains non-finite values")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"format": FORMAT_TAG, "meta": meta or {}, "tensors": entries}
    header_bytes = json.dumps(header).encode("utf-8")

    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(np.uint32(len(header_bytes)).tobytes())
            f.write(header_bytes)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read back (tensors, meta); fails on version mismatch or truncation."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header_len = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if len(raw) < 8 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    if header.get("format") != FORMAT_TAG:
        raise CheckpointError(
            f"{path}: format {header.get('format')!r} does not match {FORMAT_TAG!r}")
    payload = raw[8 + header_len:]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload length {len(payload)} != header total {expected}")
    tensors = {}
    last_offset = -1
    for entry in header["tensors"]:
        if entry["offset"] <= last_offset:
            raise CheckpointError(f"{path}: offsets not strictly increasing")
        last_offset = entry["offset"]
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=entry["nbytes"] // 4,
                            offset=entry["offset"]).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    return tensors, header["meta"]


def state_dict_to_tensors(state_dict) -> dict:
    """Flatten a torch state dict to a name -> float32 numpy map."""
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in state_dict.items()}


def tensors_to_state_dict(tensors: dict):
    import torch

    return {k: torch.from_numpy(v.copy()) for k, v in tensors.items()}


def checksum(tensors: dict) -> str:
    """Stable content hash over names, shapes and float32 payload bytes."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def module_checksum(module) -> str:
    """Checksum of a torch module's current parameters and buffers."""
    return checksum(state_dict_to_tensors(module.state_dict()))
