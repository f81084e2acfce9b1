"""Central finite differences, the independent check on :func:`backward`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, backward, kink_monitor
from .ops import NumericError
from .params import ParamStore


def _eval(f, store) -> float:
    out = f(store)
    out = float(out.value if hasattr(out, "value") else out)
    if not np.isfinite(out):
        raise NumericError("objective returned a non-finite value")
    return out


def finite_diff_grad(f, store: ParamStore, eps: float = 1e-5, names=None) -> dict[str, np.ndarray]:
    """Gradient of ``f(store)`` by central differences, one coordinate at a time."""
    if not eps > 0:
        raise NumericError("eps must be positive")
    grads = {}
    for name in (store if names is None else names):
        arr = store[name]
        flat = arr.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _eval(f, store)
            flat[i] = orig - eps
            fm = _eval(f, store)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * eps)
        grads[name] = g.reshape(arr.shape)
    return grads


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradCheckReport:
    coords: list[tuple[str, int]]
    analytic: np.ndarray
    numeric: np.ndarray
    skipped: int

    @property
    def rel_err(self) -> np.ndarray:
        return relative_error(self.analytic, self.numeric)

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if len(self.coords) else 0.0


def check_gradients(loss_fn, store: ParamStore, n_coords: int, rng: np.random.Generator,
                    eps: float = 1e-5, names=None) -> GradCheckReport:
    """Compare backward against central differences on random coordinates.

    ``loss_fn(tape)`` must build the loss on the given tape. Coordinates whose
    +/- eps evaluations land on different branches of a piecewise op
    (relu6, relu, abs, max) are skipped and replaced by fresh draws.
    """
    store.zero_grad()
    tape = Tape()
    backward(tape, loss_fn(tape))
    analytic_all = {n: store.grad(n).copy() for n in store}
    store.zero_grad()

    def f(_):
        return loss_fn(Tape())

    names = list(store if names is None else names)
    sizes = np.array([store[n].size for n in names], dtype=float)
    coords, analytic, numeric = [], [], []
    skipped = 0
    seen = set()
    budget = 20 * n_coords
    total = int(sizes.sum())
    while len(coords) < min(n_coords, total) and budget > 0:
        budget -= 1
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        idx = int(rng.integers(store[name].size))
        if (name, idx) in seen:
            continue
        seen.add((name, idx))
        flat = store[name].reshape(-1)
        orig = flat[idx]
        with kink_monitor() as base:
            _eval(f, store)
        flat[idx] = orig + eps
        with kink_monitor() as plus:
            fp = _eval(f, store)
        flat[idx] = orig - eps
        with kink_monitor() as minus:
            fm = _eval(f, store)
        flat[idx] = orig
        if plus != base or minus != base:
            skipped += 1
            continue
        coords.append((name, idx))
        analytic.append(analytic_all[name].reshape(-1)[idx])
        numeric.append((fp - fm) / (2 * eps))
    return GradCheckReport(coords, np.array(analytic), np.array(numeric), skipped)
