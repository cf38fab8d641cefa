"""The HSTN binary tensor format.

Layout: ``b"HSTN"``, little-endian u32 rank, ``rank`` little-endian u32 dims,
then ``prod(dims)`` little-endian f32 values in row-major order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"HSTN"
_U32_MAX = 2**32 - 1


def encode_hstn(array) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    if any(d > _U32_MAX for d in arr.shape):
        raise FormatError("dimension does not fit in u32")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_hstn(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise FormatError(f"truncated header: {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + 4 * rank:
        raise FormatError(f"truncated dims: rank {rank} needs {4 * rank} bytes")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = 1
    for d in dims:
        count *= d
        if count * 4 > len(buf):
            raise FormatError(f"dims {dims} overflow the {len(buf)}-byte payload")
    offset = 8 + 4 * rank
    payload = buf[offset:]
    if len(payload) != 4 * count:
        raise FormatError(f"payload has {len(payload)} bytes, dims {dims} need {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_hstn(path, array) -> None:
    data = array.data if hasattr(array, "data") and not isinstance(array, np.ndarray) else array
    atomic_write_bytes(path, encode_hstn(data))


def read_hstn(path) -> np.ndarray:
    return decode_hstn(Path(path).read_bytes())
