"""Flat binary tensor container: b"TNSR" | u32 rank | rank x u32 dims | f64 LE payload."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"


def dumps_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def loads_tensor(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise ValueError("not a TNSR tensor")
    (rank,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    off = 8 + 4 * rank
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) - off != 8 * size:
        raise ValueError(f"payload is {len(data) - off} bytes, expected {8 * size}")
    return np.frombuffer(data, dtype="<f8", offset=off, count=size).reshape(dims).astype(np.float64)


def save_tensor(path: str | Path, arr) -> None:
    Path(path).write_bytes(dumps_tensor(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    return loads_tensor(Path(path).read_bytes())
