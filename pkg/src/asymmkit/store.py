"""Named trainable tensors with gradient and momentum buffers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    momentum: np.ndarray
    no_decay: bool = False


class ParamStore:
    """Ordered collection of trainable tensors plus non-trainable buffers.

    Values are always updated in place, so views handed out by
    :meth:`view` stay valid across optimizer steps and weight loads.
    Iteration order is insertion order.
    """

    def __init__(self):
        self.params: dict[str, Param] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray, no_decay: bool = False) -> None:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate tensor name {name!r}")
        value = np.ascontiguousarray(value)
        self.params[name] = Param(value, np.zeros_like(value), np.zeros_like(value), no_decay)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate tensor name {name!r}")
        self.buffers[name] = np.ascontiguousarray(value)

    def __getitem__(self, name: str) -> np.ndarray:
        if name in self.params:
            return self.params[name].value
        return self.buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def view(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix`` keyed by their remaining name."""
        out = {}
        for name in list(self.params) + list(self.buffers):
            if name.startswith(prefix):
                out[name[len(prefix):]] = self[name]
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            self.params[name].grad += g

    def state(self) -> dict[str, np.ndarray]:
        """Every tensor, trainables first then buffers, in store order."""
        out = {n: p.value for n, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        expected = self.state()
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise KeyError(f"tensor names differ (missing {sorted(missing)[:5]}, extra {sorted(extra)[:5]})")
        for name, arr in tensors.items():
            dst = expected[name]
            if arr.shape != dst.shape or arr.dtype != dst.dtype:
                raise ValueError(f"{name}: got {arr.dtype}{arr.shape}, expected {dst.dtype}{dst.shape}")
            dst[...] = arr

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, p in self.params.items():
            other.add(name, p.value.copy(), p.no_decay)
        for name, b in self.buffers.items():
            other.add_buffer(name, b.copy())
        return other
