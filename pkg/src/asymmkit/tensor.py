"""Dense NCHW tensors.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(n, c, h, w) in C order, with dtype float32 or float64.  The helpers here
validate that contract and provide the few channel-level primitives the
blocks are assembled from.
"""

from __future__ import annotations

import os
from typing import NamedTuple, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# ASYMMKIT_DEBUG=1 turns on finiteness checks after every primitive.
DEBUG = os.environ.get("ASYMMKIT_DEBUG", "") not in ("", "0")


class TensorError(ValueError):
    """Shape, dtype or value contract violated."""


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def numel(self) -> int:
        return self.n * self.c * self.h * self.w


def shape_of(x: np.ndarray) -> Shape:
    check_tensor(x)
    return Shape(*x.shape)


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(x, np.ndarray):
        raise TensorError(f"{name}: expected ndarray, got {type(x).__name__}")
    if x.ndim != 4:
        raise TensorError(f"{name}: expected rank 4 (n, c, h, w), got shape {x.shape}")
    if x.dtype not in DTYPES:
        raise TensorError(f"{name}: unsupported dtype {x.dtype}")
    return x


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise TensorError(f"non-finite values produced by {where}")
    return x


def _debug(x: np.ndarray, where: str) -> np.ndarray:
    if DEBUG:
        check_finite(x, where)
    return x


def tensor(data, dtype=np.float64) -> np.ndarray:
    """Copy ``data`` into a C-contiguous NCHW tensor."""
    x = np.array(data, dtype=dtype, order="C")
    return check_tensor(x)


def zeros(shape: Sequence[int], dtype=np.float64) -> np.ndarray:
    return check_tensor(np.zeros(tuple(shape), dtype=dtype))


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Stack tensors along the channel axis in list order.

    Zero-channel parts are allowed and contribute nothing.  A single part is
    returned as-is.
    """
    if len(parts) == 0:
        raise TensorError("concat_channels needs at least one part")
    first = check_tensor(parts[0], "parts[0]")
    n, _, h, w = first.shape
    for i, p in enumerate(parts):
        check_tensor(p, f"parts[{i}]")
        if p.dtype != first.dtype:
            raise TensorError(f"parts[{i}]: dtype {p.dtype} != {first.dtype}")
        if (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise TensorError(
                f"parts[{i}]: shape {p.shape} does not match (n, h, w) = {(n, h, w)}"
            )
    if len(parts) == 1:
        return first
    return np.concatenate([p for p in parts if p.shape[1] > 0] or [first], axis=1)


def split_channels(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels` for known part widths."""
    check_tensor(x)
    if sum(sizes) != x.shape[1]:
        raise TensorError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(x[:, start:start + s])
        start += s
    return out


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape != b.shape:
        raise TensorError(f"add: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise TensorError(f"add: dtype mismatch {a.dtype} vs {b.dtype}")
    return _debug(a + b, "add")


def scale(a: np.ndarray, s) -> np.ndarray:
    """Multiply by a scalar or by a per-(n, c) gate broadcast over h, w."""
    check_tensor(a, "a")
    s = np.asarray(s, dtype=a.dtype)
    if s.ndim not in (0, 4) or (s.ndim == 4 and s.shape[2:] != (1, 1)):
        raise TensorError(f"scale: factor shape {s.shape} not scalar or (n, c, 1, 1)")
    if s.ndim == 4 and s.shape[:2] != a.shape[:2]:
        raise TensorError(f"scale: gate {s.shape} does not match {a.shape}")
    return _debug(a * s, "scale")


def global_avg_pool(a: np.ndarray) -> np.ndarray:
    check_tensor(a)
    n, c, h, w = a.shape
    if h < 1 or w < 1:
        raise TensorError("global_avg_pool needs h, w >= 1")
    # Averaging deviations from the first pixel keeps constant planes exact.
    ref = a[:, :, :1, :1]
    out = ref + (a - ref).sum(axis=(2, 3), keepdims=True) / (h * w)
    return _debug(out, "global_avg_pool")


def global_avg_pool_backward(grad_out: np.ndarray, in_shape: Sequence[int]) -> np.ndarray:
    n, c, h, w = in_shape
    return np.broadcast_to(grad_out / (h * w), (n, c, h, w)).copy()
