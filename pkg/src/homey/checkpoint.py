"""Checkpoint container: magic "HMYCKPT1", little-endian u32 version,
u64 header length, JSON tensor directory, raw IEEE-754 payload."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HMYCKPT1"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named arrays in dict order; payload is contiguous and LE."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        blob = np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": dtype, "byte_offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(entries, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, = struct.unpack("<I", buf[8:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    hlen, = struct.unpack("<Q", buf[12:20])
    try:
        entries = json.loads(buf[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = buf[20 + hlen:]
    out: dict[str, np.ndarray] = {}
    for e in entries:
        dtype = _DTYPES.get(e["dtype"])
        if dtype is None:
            raise CheckpointError(f"unsupported dtype {e['dtype']}")
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["byte_offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        out[e["name"]] = arr.reshape(shape).astype(e["dtype"])
    return out
