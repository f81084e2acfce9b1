"""Small generator / discriminator networks and the fixed perceptual features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import ParamStore, ad
from ..seqmodels import _fetch, init_linear


@dataclass(frozen=True)
class SynthConfig:
    res: int = 32
    g_widths: tuple = (256,)
    d_widths: tuple = (128,)
    lr: float = 2e-4
    perceptual_seed: int = 7
    w_adv: float = 1.0
    w_l1: float = 1.0
    w_perc: float = 1.0
    batch: int = 4      # sequences per step; every frame of each sequence is used
    steps: int = 5000
    seed: int = 0
    eval_every: int = 250

    def __post_init__(self):
        if self.res % 2 or self.res < 8:
            raise ValueError("resolution must be even and >= 8")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch < 1 or self.steps < 1 or self.eval_every < 1:
            raise ValueError("batch, steps and eval_every must be >= 1")
        if min(self.w_adv, self.w_l1, self.w_perc) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.g_widths or not self.d_widths or min(self.g_widths + self.d_widths) < 1:
            raise ValueError("layer widths must be positive")


def _dense_init(store, prefix, sizes, rng):
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(store, f"{prefix}.l{k + 1}", n_out, n_in, rng)


def _dense(store, prefix, x, n_layers, act, tape):
    for k in range(n_layers):
        W = _fetch(store, f"{prefix}.l{k + 1}.W", tape)
        b = _fetch(store, f"{prefix}.l{k + 1}.b", tape)
        x = ad.add(ad.matmul(x, ad.transpose(W)), b)
        if k < n_layers - 1:
            x = act(x)
    return x


class Generator:
    """Dense encoder-decoder over the flattened pair (x_t, prev); sigmoid output."""

    prefix = "gen"

    def __init__(self, cfg: SynthConfig, store: ParamStore, rng=None):
        self.cfg, self.store = cfg, store
        self.n_px = cfg.res * cfg.res
        self.sizes = (2 * self.n_px,) + tuple(cfg.g_widths) + (self.n_px,)
        if rng is not None:
            _dense_init(store, self.prefix, self.sizes, rng)

    def names(self):
        return self.store.names(self.prefix + ".")

    def __call__(self, x_t, prev, tape=None):
        """x_t, prev: (..., res, res) -> (..., res, res) in (0, 1)."""
        res = self.cfg.res
        xs, ps = ad.value(x_t).shape, ad.value(prev).shape
        if xs[-2:] != (res, res) or ps[-2:] != (res, res) or xs != ps:
            raise ValueError(f"generator expects matching {res}x{res} images, got {xs} and {ps}")
        lead = xs[:-2]
        flat = ad.concat([ad.reshape(x_t, lead + (self.n_px,)), ad.reshape(prev, lead + (self.n_px,))], axis=-1)
        out = _dense(self.store, self.prefix, flat, len(self.sizes) - 1, ad.relu, tape)
        return ad.reshape(ad.sigmoid(out), lead + (res, res))


class Discriminator:
    """Dense network over the 4-tuple (x_prev, x_t, y_prev, y_t); returns the logit."""

    prefix = "disc"

    def __init__(self, cfg: SynthConfig, store: ParamStore, rng=None):
        self.cfg, self.store = cfg, store
        self.n_px = cfg.res * cfg.res
        self.sizes = (4 * self.n_px,) + tuple(cfg.d_widths) + (1,)
        if rng is not None:
            _dense_init(store, self.prefix, self.sizes, rng)

    def names(self):
        return self.store.names(self.prefix + ".")

    def logit(self, x_prev, x_t, y_prev, y_t, tape=None):
        res = self.cfg.res
        shapes = {ad.value(a).shape for a in (x_prev, x_t, y_prev, y_t)}
        if len(shapes) != 1 or next(iter(shapes))[-2:] != (res, res):
            raise ValueError(f"discriminator expects four matching {res}x{res} images")
        lead = next(iter(shapes))[:-2]
        flat = ad.concat([ad.reshape(a, lead + (self.n_px,)) for a in (x_prev, x_t, y_prev, y_t)], axis=-1)
        out = _dense(self.store, self.prefix, flat, len(self.sizes) - 1, ad.leaky_relu, tape)
        return ad.reshape(out, lead)

    def __call__(self, x_prev, x_t, y_prev, y_t, tape=None):
        """Score in (0, 1)."""
        return ad.sigmoid(self.logit(x_prev, x_t, y_prev, y_t, tape))


def generator_forward(G: Generator, x_t, prev, tape=None):
    return G(x_t, prev, tape)


def discriminator_forward(D: Discriminator, x_prev, x_t, y_prev, y_t, tape=None):
    return D(x_prev, x_t, y_prev, y_t, tape)


class PerceptualFeatures:
    """Two feature maps from a fixed, seeded random convolution stack.

    3x3 convolutions, stride 2, relu: 1 -> 4 -> 8 channels. The weights are
    constants, never trained.
    """

    def __init__(self, seed: int = 7):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(0.0, 1.0 / 3.0, (4, 1, 3, 3))
        self.w2 = rng.normal(0.0, 1.0 / 6.0, (8, 4, 3, 3))

    def __call__(self, img):
        v = ad.value(img)
        x = ad.reshape(img, (-1, 1) + v.shape[-2:])
        f1 = ad.relu(ad.conv2d(x, self.w1, stride=2))
        f2 = ad.relu(ad.conv2d(f1, self.w2, stride=2))
        return f1, f2

    def distance(self, a, b):
        """Sum over the two layers of the mean squared feature difference."""
        total = 0.0
        for fa, fb in zip(self(a), self(b)):
            total = ad.add(total, ad.mean(ad.square(ad.sub(fa, fb))))
        return total


def build_networks(cfg: SynthConfig, rng=None):
    """(store, G, D) with freshly initialized parameters."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    store = ParamStore()
    G = Generator(cfg, store, rng)
    D = Discriminator(cfg, store, rng)
    return store, G, D
