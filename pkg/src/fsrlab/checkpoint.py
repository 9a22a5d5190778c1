"""Flat binary tensor records.

Layout (all integers little-endian)::

    b"FSRCKPT"            7-byte magic
    u32 version
    u32 entry count
    per entry:
        u32 name length, name bytes (utf-8)
        u32 rank, rank x u64 dims
        prod(dims) x f64 payload

Used for model checkpoints and for the per-sample image files of a
generated dataset.
"""
from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"FSRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(entries: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries.items():
        arr = np.array(arr, dtype="<f8", order="C")  # ascontiguousarray would lift 0-d to 1-d
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict:
    view = memoryview(blob)
    if bytes(view[:7]) != MAGIC:
        raise CheckpointError("bad magic; not an FSRCKPT record")
    pos = 7

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated record")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(view):
            raise CheckpointError("truncated record")
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        nbytes = 8 * n
        if pos + nbytes > len(view):
            raise CheckpointError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").astype(np.float64).reshape(dims)
        pos += nbytes
    if pos != len(view):
        raise CheckpointError("trailing bytes after last entry")
    return out


def save(path, entries: Mapping[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(entries))
    os.replace(tmp, path)


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())
