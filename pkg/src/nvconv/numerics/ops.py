"""Plain array math on float64 numpy arrays.

These are the non-recording versions of the primitives; the recording
versions in :mod:`nvconv.numerics.autodiff` dispatch here when no tracked
value is involved.
"""

import numpy as np


class NumericError(ValueError):
    """Raised on non-finite inputs or shape mismatches."""


def as_real(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, what: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite value in {what}")
    return x


def relu6(x) -> np.ndarray:
    x = check_finite(as_real(x), "relu6 input")
    return np.minimum(np.maximum(x, 0.0), 6.0)


def sigmoid(x) -> np.ndarray:
    x = check_finite(as_real(x), "sigmoid input")
    return _sigmoid(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def matmul(a, b) -> np.ndarray:
    a = check_finite(as_real(a), "matmul lhs")
    b = check_finite(as_real(b), "matmul rhs")
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise NumericError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b
