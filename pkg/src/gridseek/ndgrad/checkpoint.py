"""GSKW weight checkpoint format.

Layout (little-endian)::

    b"GSKW" | u32 version | u32 count
    per parameter: u32 name_len | name (UTF-8) | u32 rank | u32 extents... |
                   fp32 values
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

from ..errors import CheckpointError

MAGIC = b"GSKW"
VERSION = 1


def encode_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(weights)))
    for name, arr in weights.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")  # keeps rank 0, unlike ascontiguousarray
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_weights(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"corrupt checkpoint: truncated at byte {pos} (need {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt checkpoint: parameter name is not UTF-8") from None
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
        if name in out:
            raise CheckpointError(f"corrupt checkpoint: duplicate parameter {name}")
        out[name] = arr
    if pos != len(view):
        raise CheckpointError(f"corrupt checkpoint: {len(view) - pos} trailing bytes")
    return out


def save_weights(weights: Mapping[str, np.ndarray], path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_weights(weights))
    os.replace(tmp, path)


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_weights(fh.read())
