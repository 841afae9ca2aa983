"""Binary weight files.

Layout, all integers little-endian::

    b"AMNW"  u32 version  u32 count
    count x { u32 name_len  name (UTF-8)  u8 dtype (0=f32, 1=f64)
              u32 rank  rank x u32 dim  payload (C order) }
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AMNW"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class WeightFileError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in TAGS:
            raise WeightFileError(f"{name}: unsupported dtype {arr.dtype}")
        tag = TAGS[arr.dtype]
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<BI{arr.ndim}I", tag, arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
    return b"".join(out)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise WeightFileError(f"truncated weight file at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise WeightFileError("not a weight file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = bytes(take(n)).decode("utf-8")
        if name in tensors:
            raise WeightFileError(f"duplicate tensor name {name!r}")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in DTYPES:
            raise WeightFileError(f"{name}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(size), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(view):
        raise WeightFileError(f"{len(view) - pos} trailing bytes after last record")
    return tensors


def save(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
