"""TNSR tensor files.

Layout (little-endian): magic ``b"TNSR"``, u8 dtype code (0 = f32, 1 = f16),
u8 rank, ``rank`` x u64 dims, raw element data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNSR"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float16): 1}
_DTYPES = {v: k for k, v in _CODES.items()}


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise ValueError(f"TNSR stores f32 or f16, got {arr.dtype}")
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError("TNSR rank must be in 1..255")
    head = MAGIC + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise ValueError("not a TNSR file (bad magic)")
    code, rank = struct.unpack_from("<BB", data, 4)
    if code not in _DTYPES:
        raise ValueError(f"unknown TNSR dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", data, 6)
    offset = 6 + 8 * rank
    dtype = _DTYPES[code].newbyteorder("<")
    count = int(np.prod(dims)) if dims else 1
    expected = offset + count * dtype.itemsize
    if len(data) != expected:
        raise ValueError(f"TNSR payload size {len(data)} != expected {expected}")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return arr.astype(_DTYPES[code]).reshape(dims)


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
