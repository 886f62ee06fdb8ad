"""Binary checkpoint serialization.

Layout: ASCII magic "VAN1", then per record a u64 little-endian name length,
the UTF-8 name, a u64 rank, one u64 extent per axis, and the float64
little-endian array data in C order. Records keep insertion order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VAN1"

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint"]


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    blobs = [MAGIC]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if not raw:
            raise ValueError("checkpoint entry with empty name")
        a = np.asarray(arr, dtype="<f8")
        blobs.append(struct.pack("<Q", len(raw)))
        blobs.append(raw)
        blobs.append(struct.pack("<Q", a.ndim))
        blobs.append(struct.pack(f"<{a.ndim}Q", *a.shape) if a.ndim else b"")
        blobs.append(a.tobytes(order="C"))
    Path(path).write_bytes(b"".join(blobs))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a VAN1 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = 4
    total = len(buf)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > total:
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < total:
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        if name in out:
            raise ValueError(f"{path}: duplicate entry {name!r}")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(shape)
    return out
