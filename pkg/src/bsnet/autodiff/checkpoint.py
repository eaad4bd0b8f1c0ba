"""Flat binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"BSNETCKP"
    version    u32      1
    mode       u8       32 or 64 (float width of every record)
    count      u32      number of records
    record*    name_len u16, name utf-8, ndim u8, dims u32 * ndim, data

Records are written in sorted name order so equal states give equal bytes.
"""

from __future__ import annotations

import os
import struct
from typing import Dict

import numpy as np

MAGIC = b"BSNETCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | os.PathLike, state: Dict[str, np.ndarray], mode: str) -> None:
    width = {"float32": 32, "float64": 64}[mode]
    dtype = np.dtype("<f4") if width == 32 else np.dtype("<f8")
    parts = [MAGIC, struct.pack("<IBI", VERSION, width, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name])
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike):
    """Return ``(state, mode)`` read from ``path``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, width, count = struct.unpack_from("<IBI", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if width not in (32, 64):
        raise CheckpointError(f"{path}: bad numeric mode flag {width}")
    dtype = np.dtype("<f4") if width == 32 else np.dtype("<f8")
    offset = 8 + struct.calcsize("<IBI")
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(blob, dtype=dtype, count=n, offset=offset).reshape(shape).copy()
        offset += n * dtype.itemsize
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return state, f"float{width}"
