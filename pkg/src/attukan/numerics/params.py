"""Named parameter storage and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import Tensor


@dataclass
class Param:
    value: Tensor
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad


@dataclass
class ParamStore:
    """Ordered map from hierarchical name (``"enc1.conv.w"``) to a :class:`Param`."""

    dtype: np.dtype = np.dtype(np.float64)
    entries: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, data) -> Tensor:
        if name in self.entries:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(data, dtype=self.dtype)
        t = Tensor(arr, requires_grad=True, name=name)
        t.grad = np.zeros_like(arr)
        self.entries[name] = Param(t, np.zeros_like(arr), np.zeros_like(arr))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name].value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return ((k, p.value) for k, p in self.entries.items())

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grad(self) -> None:
        for p in self.entries.values():
            p.value.grad.fill(0.0)

    def count(self) -> int:
        return int(sum(p.value.size for p in self.entries.values()))

    def subset(self, prefix: str) -> list[str]:
        return [k for k in self.entries if k.startswith(prefix)]


def adam_step(
    store: ParamStore,
    lr: float = 0.003,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update of every entry. Gradients are left in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in store.entries.values():
        g = p.value.grad
        p.t += 1
        p.m *= beta1
        p.m += (1 - beta1) * g
        p.v *= beta2
        p.v += (1 - beta2) * g * g
        mhat = p.m / (1 - beta1**p.t)
        vhat = p.v / (1 - beta2**p.t)
        p.value.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.data.dtype, copy=False)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)
