"""NVRD1 tensor blobs.

Layout (little-endian)::

    b"NVRD1\\0" | u32 rank | rank x u32 dims | u8 dtype | row-major payload

Only dtype 0 (float32) is defined.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NVRD1\0"
DTYPE_F32 = 0


class BlobFormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    head = MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<B", DTYPE_F32)
    return head + arr.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if not buf.startswith(MAGIC):
        raise BlobFormatError("bad magic")
    off = len(MAGIC)
    if len(buf) < off + 4:
        raise BlobFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) < off + 4 * rank + 1:
        raise BlobFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    (dtype,) = struct.unpack_from("<B", buf, off)
    off += 1
    if dtype != DTYPE_F32:
        raise BlobFormatError(f"unsupported dtype code {dtype}")
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) - off != 4 * count:
        raise BlobFormatError(
            f"payload size {len(buf) - off} does not match shape {tuple(dims)}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


def save(path, array) -> str:
    """Write ``array`` to ``path``; returns the sha256 of the bytes written."""
    data = encode(array)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
