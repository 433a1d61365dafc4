"""Flat binary container for named float64 arrays.

Layout (little endian)::

    b"PVPT"  u32 version  u32 count
    repeated count times:
        u32 name_len  name (utf-8)  u32 ndim  u64 dims[ndim]  f64 data[prod(dims)]
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PVPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f8", order="C")   # ascontiguousarray would turn 0-d into 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_arrays(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode(buf, source=str(path))


def decode(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    off = 0

    def need(n):
        if off + n > len(buf):
            raise CheckpointError(f"{source}: truncated at byte {off} (wanted {n} more bytes)")

    need(12)
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic at byte 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version} at byte 4")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(4)
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(nlen)
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        need(4)
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(8 * ndim)
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        need(8 * size)
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - off} trailing bytes at byte {off}")
    return out
