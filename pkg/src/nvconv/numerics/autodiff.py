"""Tape-based reverse-mode differentiation over numpy arrays.

Every op in this module accepts plain arrays or :class:`Var` values. With
plain arrays the op just computes the result; as soon as one argument is a
``Var`` the op is recorded on that value's :class:`Tape` so that
:meth:`Tape.backward` can replay it in reverse. Loss code can therefore be
written once and used both for reporting and for training.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .ops import NumericError, _sigmoid, as_real, check_finite


class Var:
    __slots__ = ("value", "grad", "tape", "parents", "backward_fn")

    def __init__(self, value, tape, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[tuple[Var, object, str]] = []

    def param(self, store, name: str) -> Var:
        v = Var(store[name], self)
        self.leaves.append((v, store, name))
        return v

    def watch(self, x) -> Var:
        """Track a plain array so its gradient lands in ``Var.grad``."""
        v = Var(as_real(x), self)
        self.leaves.append((v, None, None))
        return v

    def record(self, value, parents, backward_fn) -> Var:
        v = Var(value, self, parents, backward_fn)
        self.nodes.append(v)
        return v

    def backward(self, loss: Var) -> None:
        backward(self, loss)


def backward(tape: Tape, loss: Var) -> None:
    """Reverse accumulation from a scalar ``loss``.

    Parameter gradients are added into the owning ParamStore, so calling this
    twice without zeroing doubles them.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise NumericError("loss is not recorded on this tape")
    if loss.value.size != 1:
        raise NumericError(f"loss must be scalar, got shape {loss.value.shape}")
    check_finite(loss.value, "loss")
    for node in tape.nodes:
        node.grad = None
    for leaf, _, _ in tape.leaves:
        leaf.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not isinstance(parent, Var):
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    for leaf, store, name in tape.leaves:
        if store is not None and leaf.grad is not None:
            store.grad(name)[...] += leaf.grad


# ---------------------------------------------------------------- kink log

_kink_log: list | None = None


@contextmanager
def kink_monitor():
    """Collect branch signatures of piecewise ops evaluated inside the block."""
    global _kink_log
    saved = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = saved


def _log_branch(codes: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.asarray(codes, dtype=np.int8).tobytes())


# ---------------------------------------------------------------- helpers

def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise NumericError("operands recorded on different tapes")
    return tape


def value(x):
    return x.value if isinstance(x, Var) else as_real(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record(
        out, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def neg(a):
    av = value(a)
    tape = _tape_of(a)
    if tape is None:
        return -av
    return tape.record(-av, (a,), lambda g: (-g,))


def sigmoid(x):
    xv = value(x)
    out = _sigmoid(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu6(x):
    # subgradient 0 at both kinks
    xv = value(x)
    _log_branch((xv > 0).astype(np.int8) + (xv >= 6))
    out = np.minimum(np.maximum(xv, 0.0), 6.0)
    tape = _tape_of(x)
    if tape is None:
        return out
    mask = (xv > 0) & (xv < 6)
    return tape.record(out, (x,), lambda g: (g * mask,))


def relu(x):
    xv = value(x)
    _log_branch(xv > 0)
    out = np.maximum(xv, 0.0)
    tape = _tape_of(x)
    if tape is None:
        return out
    mask = xv > 0
    return tape.record(out, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2):
    xv = value(x)
    _log_branch(xv > 0)
    scale = np.where(xv > 0, 1.0, slope)
    out = xv * scale
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * scale,))


def absolute(x):
    xv = value(x)
    _log_branch(np.sign(xv))
    out = np.abs(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * np.sign(xv),))


def square(x):
    xv = value(x)
    tape = _tape_of(x)
    if tape is None:
        return xv * xv
    return tape.record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def sqrt(x):
    """Square root whose derivative at exactly 0 is taken as 0."""
    xv = value(x)
    out = np.sqrt(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    safe = np.where(out > 0, out, 1.0)
    return tape.record(out, (x,), lambda g: (np.where(out > 0, 0.5 * g / safe, 0.0),))


def exp(x):
    out = np.exp(value(x))
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * out,))


def log(x):
    xv = value(x)
    tape = _tape_of(x)
    if tape is None:
        return np.log(xv)
    return tape.record(np.log(xv), (x,), lambda g: (g / xv,))


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow."""
    xv = value(x)
    out = -np.logaddexp(0.0, -xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, (x,), lambda g: (g * _sigmoid(-xv),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim < 1 or bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise NumericError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def bw(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return tape.record(out, (a, b), bw)


def transpose(a, axes=None):
    av = value(a)
    out = np.transpose(av, axes)
    tape = _tape_of(a)
    if tape is None:
        return out
    inv = None if axes is None else np.argsort(axes)
    return tape.record(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, idx):
    av = value(a)
    out = av[idx]
    tape = _tape_of(a)
    if tape is None:
        return out

    basic = _is_basic_index(idx)

    def bw(g):
        ga = np.zeros_like(av)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return tape.record(out, (a,), bw)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)


def concat(xs, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tape.record(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs, axis: int = 0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    n = len(vals)
    return tape.record(
        out, tuple(xs),
        lambda g: tuple(np.squeeze(s, axis=axis) for s in np.split(g, n, axis=axis)),
    )


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims: bool = False):  # noqa: A001
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    tape = _tape_of(a)
    if tape is None:
        return out

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return tape.record(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False):
    av = value(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(a, axis: int):
    """Max along one axis; the gradient goes to the first maximiser."""
    av = value(a)
    idx = np.argmax(av, axis=axis)
    _log_branch(idx)
    out = np.take_along_axis(av, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    tape = _tape_of(a)
    if tape is None:
        return out

    def bw(g):
        ga = np.zeros_like(av)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return tape.record(out, (a,), bw)


# ---------------------------------------------------------------- convolution

def conv2d(x, w, stride: int = 1):
    """Zero-padded 'same' convolution. x: (B, C, H, W), w: (O, C, k, k)."""
    xv, wv = value(x), value(w)
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise NumericError(f"conv2d shape mismatch: {xv.shape} x {wv.shape}")
    k = wv.shape[2]
    pad = k // 2
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, k, k)
    out = np.einsum("bchwij,ocij->bohw", win, wv, optimize=True)
    tape = _tape_of(x, w)
    if tape is None:
        return out

    def bw(g):
        gw = np.einsum("bohw,bchwij->ocij", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        ho, wo = g.shape[2], g.shape[3]
        contrib = np.einsum("bohw,ocij->bchwij", g, wv, optimize=True)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib[..., i, j]
        gx = gxp[:, :, pad:pad + xv.shape[2], pad:pad + xv.shape[3]]
        return gx, gw

    return tape.record(out, (x, w), bw)
