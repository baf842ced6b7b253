"""Flat binary parameter container.

Layout (all integers little-endian)::

    magic   b"MMCK"
    version uint8   (currently 1)
    count   uint32
    count x entry:
        name_len uint16, name utf-8 bytes
        ndim     uint8,  ndim x uint32 dims
        payload  prod(dims) x float64, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(params))]
    for name, value in params.items():
        value = np.asarray(value, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes(order="C"))
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = blob[pos : pos + n]
        pos += n
        return out

    version, count = struct.unpack("<BI", take(5))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return params


def save(path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
