"""Minimal binary tensor files.

Layout (all little-endian)::

    b"TEN1" | u8 ndim | ndim x u32 dims | float32 payload, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEN1"
MAX_DIMS = 8


class TensorFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode_tensor(array) -> bytes:
    a = np.asarray(array, dtype="<f4")
    if a.ndim > MAX_DIMS:
        raise ValueError(f"tensor has {a.ndim} dims, at most {MAX_DIMS} supported")
    header = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 5:
        raise TensorFormatError("truncated header", len(buf))
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r}", 0)
    ndim = buf[4]
    if ndim > MAX_DIMS:
        raise TensorFormatError(f"ndim {ndim} exceeds {MAX_DIMS}", 4)
    end = 5 + 4 * ndim
    if len(buf) < end:
        raise TensorFormatError("truncated dims", len(buf))
    shape = struct.unpack(f"<{ndim}I", buf[5:end])
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) < end + 4 * n:
        raise TensorFormatError(f"truncated payload: expected {4 * n} bytes, found {len(buf) - end}", len(buf))
    if len(buf) > end + 4 * n:
        raise TensorFormatError("trailing bytes after payload", end + 4 * n)
    return np.frombuffer(buf, dtype="<f4", count=n, offset=end).reshape(shape).astype(np.float32)


def write_tensor(path, array) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
