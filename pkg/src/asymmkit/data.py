"""Dataset sources: seeded synthetic images and CIFAR-10 binary batches."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # (n, 3, h, w)
    labels: np.ndarray   # (n,) int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def __post_init__(self):
        if len(self.labels) == 0:
            raise DatasetError("dataset is empty")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError("image and label counts differ")


def synthetic(n: int, resolution: int = 64, num_classes: int = 10, seed: int = 0,
              shift: float = 1.0, dtype=np.float32) -> Dataset:
    """Gaussian noise images plus a per-class mean pattern.

    Labels cycle through the classes so every class is represented.
    """
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, 3, resolution, resolution)) * shift
    labels = np.arange(n) % num_classes
    images = rng.standard_normal((n, 3, resolution, resolution)) + means[labels]
    return Dataset(images.astype(dtype), labels.astype(np.int64), num_classes)


def read_cifar10(paths, limit: int | None = None, resolution: int = 32,
                 dtype=np.float32) -> Dataset:
    """Read CIFAR-10 binary batch files (3073-byte records).

    Pixels are scaled to [0, 1] and normalized per channel; ``resolution``
    must be a multiple of 32 and upsamples by pixel repetition.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            raise DatasetError(f"{p}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
        chunks.append(raw.reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    if limit is not None:
        records = records[:limit]
    labels = records[:, 0].astype(np.int64)
    if np.any(labels > 9):
        raise DatasetError("CIFAR-10 label byte out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    mean = np.array(CIFAR_MEAN)[None, :, None, None]
    std = np.array(CIFAR_STD)[None, :, None, None]
    images = (images - mean) / std
    if resolution != 32:
        if resolution % 32:
            raise DatasetError("CIFAR resolution must be a multiple of 32")
        f = resolution // 32
        images = images.repeat(f, axis=2).repeat(f, axis=3)
    return Dataset(images.astype(dtype), labels, 10)


def parse_source(source: str, resolution: int, num_classes: int, seed: int) -> Dataset:
    """``synthetic:N`` or ``cifar10:PATH[,PATH...][:LIMIT]``."""
    kind, _, rest = source.partition(":")
    if kind == "synthetic":
        n = int(rest) if rest else 64
        return synthetic(n, resolution, num_classes, seed)
    if kind == "cifar10":
        path, _, limit = rest.partition(":")
        if not path:
            raise DatasetError("cifar10 source needs a path")
        return read_cifar10(path.split(","), int(limit) if limit else None, resolution)
    raise DatasetError(f"unknown data source {source!r} (use synthetic:N or cifar10:PATH)")
