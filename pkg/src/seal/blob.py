"""SEALEMB1 binary container for 2-D float32 arrays.

Layout (all little-endian)::

    magic    8 bytes   b"SEALEMB1"
    version  u32
    rows     u64
    cols     u64
    payload  rows * cols * f32, row-major
    digest   u64       FNV-1a (64 bit) of the payload bytes
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"SEALEMB1"
BLOB_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")
_DIGEST = struct.Struct("<Q")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def _fnv1a_py(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


try:  # optional accelerator, same arithmetic
    import numba

    @numba.njit(cache=False)
    def _fnv1a_nb(buf):  # pragma: no cover - exercised only when numba present
        h = numba.uint64(FNV_OFFSET)
        p = numba.uint64(FNV_PRIME)
        for i in range(buf.shape[0]):
            h = (h ^ numba.uint64(buf[i])) * p
        return h

    def fnv1a64(data: bytes) -> int:
        if len(data) < 4096:
            return _fnv1a_py(data)
        return int(_fnv1a_nb(np.frombuffer(data, dtype=np.uint8)))

except ImportError:  # pragma: no cover
    fnv1a64 = _fnv1a_py


def encode_blob(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"blob arrays must be 1-D or 2-D, got shape {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    rows, cols = arr.shape
    return (
        _HEADER.pack(MAGIC, BLOB_VERSION, rows, cols)
        + payload
        + _DIGEST.pack(fnv1a64(payload))
    )


def decode_blob(raw: bytes) -> np.ndarray:
    if len(raw) < _HEADER.size + _DIGEST.size:
        raise IntegrityError("blob truncated: shorter than header + digest")
    magic, version, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise IntegrityError(
            f"unsupported blob version {version} (reader is v{BLOB_VERSION})"
        )
    n_bytes = rows * cols * 4
    expected = _HEADER.size + n_bytes + _DIGEST.size
    if len(raw) != expected:
        raise IntegrityError(
            f"blob length {len(raw)} does not match header ({rows}x{cols} -> {expected})"
        )
    payload = raw[_HEADER.size:_HEADER.size + n_bytes]
    (digest,) = _DIGEST.unpack_from(raw, _HEADER.size + n_bytes)
    if fnv1a64(payload) != digest:
        raise IntegrityError("blob digest mismatch: payload corrupted")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_blob(path: str | os.PathLike, array: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_blob(array))
    os.replace(tmp, path)


def read_blob(path: str | os.PathLike) -> np.ndarray:
    return decode_blob(Path(path).read_bytes())
