"""Named parameter blocks, the Adam update and gradient clipping."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .ops import NumericError, as_real


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParamStore:
    """Ordered map of parameter name to value, gradient and Adam state."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(as_real(value), dtype=np.float64, copy=True)
        self._params[name] = Param(arr)
        return arr

    def add_uniform(self, name: str, shape, scale: float, rng: np.random.Generator) -> np.ndarray:
        return self.add(name, rng.uniform(-scale, scale, size=shape))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def param(self, name: str) -> Param:
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad

    def set(self, name: str, value) -> None:
        arr = as_real(value)
        p = self._params[name]
        if arr.shape != p.value.shape:
            raise NumericError(f"shape mismatch for {name}: {arr.shape} vs {p.value.shape}")
        p.value[...] = arr

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def grad_norm(self, names=None) -> float:
        names = self._params if names is None else names
        return float(np.sqrt(sum(float(np.sum(self._params[n].grad ** 2)) for n in names)))

    def checksum(self, names=None) -> str:
        h = hashlib.sha256()
        for n in (self._params if names is None else names):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self._params[n].value).tobytes())
        return h.hexdigest()

    def to_blocks(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    @classmethod
    def from_blocks(cls, blocks) -> "ParamStore":
        store = cls()
        for name, arr in blocks.items():
            store.add(name, arr)
        return store


def clip_grad_norm(store: ParamStore, max_norm: float, names=None) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    names = list(store) if names is None else list(names)
    norm = store.grad_norm(names)
    if norm > max_norm:
        scale = max_norm / norm
        for n in names:
            store.grad(n)[...] *= scale
    return norm


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names=None) -> None:
    """Bias-corrected Adam update, then zero every gradient.

    ``names`` restricts the update to a subset; the remaining blocks keep
    their values and optimizer state untouched.
    """
    if not lr > 0:
        raise NumericError(f"learning rate must be positive, got {lr}")
    for name in (store if names is None else names):
        p = store.param(name)
        g = p.grad
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()
