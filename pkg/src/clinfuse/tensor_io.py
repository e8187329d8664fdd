"""Binary tensor file format "MMT1".

Layout: magic bytes ``MMT1``, u8 rank, rank little-endian u32 dims, then
product(dims) little-endian f64 values in row-major order. Used for dataset
images, fixtures, and checkpoint parameter blobs.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"MMT1"
MAX_RANK = 8


class TensorFileError(ValueError):
    """Malformed or truncated MMT1 data."""


def write_array(fh: BinaryIO, arr: np.ndarray) -> int:
    """Append one MMT1 blob to an open binary stream; returns bytes written."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim and not a.flags["C_CONTIGUOUS"]:
        a = np.ascontiguousarray(a)  # keep 0-d rank intact
    if a.ndim > MAX_RANK:
        raise TensorFileError(f"rank {a.ndim} exceeds MMT1 limit {MAX_RANK}")
    for d in a.shape:
        if d >= 2**32:
            raise TensorFileError("dimension too large for u32")
    header = MAGIC + struct.pack("<B", a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
    payload = a.tobytes(order="C") if a.size else b""
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def read_array(fh: BinaryIO) -> np.ndarray:
    """Read one MMT1 blob from the current stream position."""
    magic = fh.read(4)
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}, expected {MAGIC!r}")
    rank_raw = fh.read(1)
    if len(rank_raw) != 1:
        raise TensorFileError("truncated file: missing rank byte")
    rank = rank_raw[0]
    if rank > MAX_RANK:
        raise TensorFileError(f"rank {rank} exceeds MMT1 limit {MAX_RANK}")
    dims_raw = fh.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise TensorFileError("truncated file: incomplete dims")
    shape = struct.unpack(f"<{rank}I", dims_raw) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    data = fh.read(8 * count)
    if len(data) != 8 * count:
        raise TensorFileError(
            f"truncated file: expected {8 * count} value bytes, got {len(data)}"
        )
    values = np.frombuffer(data, dtype="<f8", count=count)
    return values.reshape(shape).astype(np.float64)


def save(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        out = read_array(fh)
        if fh.read(1):
            raise TensorFileError("trailing bytes after tensor payload")
    return out
