"""relu6-LSTM sequence models: the listening encoder/decoder and the
text-conditioned speaking model.

All forward functions take batched arrays ``(B, T, D)`` (a single
``(T, D)`` sequence is promoted to a batch of one and squeezed back).
Pass a :class:`~nvconv.numerics.Tape` to record the computation for
training; without one the forward pass runs on plain arrays.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import DIM
from .numerics import ParamStore, ad

GATES = ("i", "f", "o", "c")
PAD, UNK = "<pad>", "<unk>"


def _fetch(store: ParamStore, name: str, tape=None):
    return tape.param(store, name) if tape is not None else store[name]


def init_linear(store, prefix, n_out, n_in, rng):
    s = 1.0 / np.sqrt(n_in)
    store.add_uniform(f"{prefix}.W", (n_out, n_in), s, rng)
    store.add_uniform(f"{prefix}.b", (n_out,), s, rng)


def linear(store, prefix, x, tape=None):
    W = _fetch(store, f"{prefix}.W", tape)
    b = _fetch(store, f"{prefix}.b", tape)
    return ad.add(ad.matmul(x, ad.transpose(W)), b)


class LstmLayer:
    """One layer's eight blocks ``{prefix}.W_g`` / ``{prefix}.b_g``, g in i, f, o, c.

    Each W_g is hidden x (hidden + input) and acts on ``[h_prev, d_t]``.
    """

    def __init__(self, store: ParamStore, prefix: str, hidden: int, n_in: int):
        self.store, self.prefix, self.hidden, self.n_in = store, prefix, hidden, n_in

    def init(self, rng):
        s = 1.0 / np.sqrt(self.hidden + self.n_in)
        for g in GATES:
            self.store.add_uniform(f"{self.prefix}.W_{g}", (self.hidden, self.hidden + self.n_in), s, rng)
        for g in GATES:
            self.store.add_uniform(f"{self.prefix}.b_{g}", (self.hidden,), s, rng)
        return self

    def names(self):
        return [f"{self.prefix}.{k}_{g}" for k in ("W", "b") for g in GATES]

    def stacked(self, tape=None):
        """(W^T of shape (hidden+input, 4*hidden), b of shape (4*hidden,))."""
        Ws = [_fetch(self.store, f"{self.prefix}.W_{g}", tape) for g in GATES]
        bs = [_fetch(self.store, f"{self.prefix}.b_{g}", tape) for g in GATES]
        W, b = ad.concat(Ws, axis=0), ad.concat(bs, axis=0)
        expect = (4 * self.hidden, self.hidden + self.n_in)
        if ad.value(W).shape != expect:
            raise ValueError(f"{self.prefix}: stacked weights {ad.value(W).shape}, expected {expect}")
        return ad.transpose(W), b


def lstm_cell_step(layer: LstmLayer, h_prev, c_prev, d_t, tape=None, weights=None):
    """One step: sigmoid gates, relu6 candidate and output activation.

    ``weights`` lets a caller reuse the stacked matrices across steps.
    """
    H = layer.hidden
    if ad.value(h_prev).shape[-1] != H or ad.value(c_prev).shape[-1] != H:
        raise ValueError(f"{layer.prefix}: state width must be {H}")
    if ad.value(d_t).shape[-1] != layer.n_in:
        raise ValueError(f"{layer.prefix}: input width {ad.value(d_t).shape[-1]}, expected {layer.n_in}")
    Wt, b = weights if weights is not None else layer.stacked(tape)
    pre = ad.add(ad.matmul(ad.concat([h_prev, d_t], axis=-1), Wt), b)
    gates = ad.sigmoid(pre[..., :3 * H])
    i, f, o = gates[..., :H], gates[..., H:2 * H], gates[..., 2 * H:]
    cand = ad.relu6(pre[..., 3 * H:])
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, cand))
    h = ad.mul(o, ad.relu6(c))
    return h, c


def run_stack(layers, xs, states=None, tape=None, mask=None):
    """Feed the input list ``xs`` (one (B, D) array per step) through the stack.

    Returns (top-layer outputs per step, final (h, c) per layer). Where
    ``mask`` (B, T) is 0 the step is skipped and state carries over.
    """
    B = ad.value(xs[0]).shape[0]
    if states is None:
        states = [(np.zeros((B, l.hidden)), np.zeros((B, l.hidden))) for l in layers]
    states = list(states)
    weights = [l.stacked(tape) for l in layers]
    outs = []
    for t, x in enumerate(xs):
        m = None if mask is None else mask[:, t:t + 1]
        for k, layer in enumerate(layers):
            h0, c0 = states[k]
            h, c = lstm_cell_step(layer, h0, c0, x, weights=weights[k])
            if m is not None and not m.all():
                h = ad.add(ad.mul(h, m), ad.mul(h0, 1.0 - m))
                c = ad.add(ad.mul(c, m), ad.mul(c0, 1.0 - m))
            states[k] = (h, c)
            x = h
        outs.append(x)
    return outs, states


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (T, D) or (B, T, D), got shape {x.shape}")
    return x, False


def _steps(seq):
    return [seq[:, t, :] for t in range(seq.shape[1])]


def _decode(store, layers, out_prefix, states, steps, gt, start, tape):
    """Shared decoder loop; teacher-forced when ``gt`` is given."""
    if gt is None and start is None:
        raise ValueError("free-running decoding needs a start frame")
    if gt is not None and gt.shape[1] != steps:
        raise ValueError(f"teacher forcing needs {steps} ground-truth frames, got {gt.shape[1]}")
    weights = [l.stacked(tape) for l in layers]
    W = ad.transpose(_fetch(store, f"{out_prefix}.W", tape))
    b = _fetch(store, f"{out_prefix}.b", tape)
    states = list(states)
    prev = start
    outs = []
    for t in range(steps):
        x = prev
        for k, layer in enumerate(layers):
            h, c = lstm_cell_step(layer, *states[k], x, weights=weights[k])
            states[k] = (h, c)
            x = h
        y = ad.add(ad.matmul(x, W), b)
        outs.append(y)
        prev = gt[:, t, :] if gt is not None else y
    return ad.stack(outs, axis=1)


# ---------------------------------------------------------------- listening

@dataclass(frozen=True)
class ListeningConfig:
    layers: int = 4
    hidden: int = 32
    n: int = 10
    dim: int = DIM

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.n < 2:
            raise ValueError("sequence length n must be >= 2")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")


class ListeningModel:
    """Encoder over n speaker frames, decoder emitting n listener frames."""

    prefix = "listen"

    def __init__(self, cfg: ListeningConfig, store: ParamStore | None = None, rng=None):
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        H = cfg.hidden
        self.enc = [LstmLayer(self.store, f"listen.enc.layer{k + 1}", H, cfg.dim if k == 0 else H)
                    for k in range(cfg.layers)]
        self.dec = [LstmLayer(self.store, f"listen.dec.layer{k + 1}", H, cfg.dim if k == 0 else H)
                    for k in range(cfg.layers)]
        if store is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            for layer in self.enc + self.dec:
                layer.init(rng)
            init_linear(self.store, "listen.out", cfg.dim, H, rng)

    def encode(self, frames, tape=None):
        x, _ = _batch(frames)
        if x.shape[1] != self.cfg.n:
            raise ValueError(f"input length {x.shape[1]} != configured n={self.cfg.n}")
        _, states = run_stack(self.enc, _steps(x), tape=tape)
        return states

    def decode(self, states, steps=None, gt=None, start=None, tape=None):
        steps = self.cfg.n if steps is None else steps
        if gt is not None:
            gt, _ = _batch(gt)
        if start is not None:
            start = np.atleast_2d(np.asarray(start, dtype=np.float64))
        return _decode(self.store, self.dec, "listen.out", states, steps, gt, start, tape)

    def forward(self, frames, gt, tape=None):
        """Teacher-forced pass; decoder step 1 reads the last input frame."""
        x, single = _batch(frames)
        out = self.decode(self.encode(x, tape), gt=gt, start=x[:, -1, :], tape=tape)
        return out[0] if single and tape is None else out

    def predict(self, frames, start=None):
        """Free-running pass; ``start`` defaults to the last input frame."""
        x, single = _batch(frames)
        start = x[:, -1, :] if start is None else start
        out = self.decode(self.encode(x), start=start)
        return out[0] if single else out


# ---------------------------------------------------------------- speaking

class Vocabulary:
    """Token to row map; PAD is row 0 and UNK row 1."""

    def __init__(self, tokens=()):
        self.tokens = [PAD, UNK] + sorted(set(tokens) - {PAD, UNK})
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def ids(self, words, length: int) -> np.ndarray:
        """Truncate or PAD-fill to ``length``; unknown words map to UNK."""
        out = np.zeros(length, dtype=np.int64)
        for k, w in enumerate(list(words)[:length]):
            out[k] = self.index.get(w, 1)
        return out

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        toks = Path(path).read_text().split("\n")[:-1]
        if toks[:2] != [PAD, UNK]:
            raise ValueError(f"{path}: not a vocabulary file")
        return cls(toks[2:])


def hashed_row(token: str, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic initial embedding for a token, from a hash of its text."""
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.uniform(-1.0, 1.0, dim) / np.sqrt(dim)


@dataclass(frozen=True)
class SpeakingConfig:
    layers: int = 2
    hidden: int = 32
    embed: int = 16
    enc_len: int = 25
    dec_len: int = 20
    dim: int = DIM

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1 or self.embed < 1:
            raise ValueError("layers, hidden and embed must be >= 1")
        if self.enc_len < 1:
            raise ValueError("encoder length must be >= 1")
        if self.dec_len < 2:
            raise ValueError("decoder length must be >= 2")


class SpeakingModel:
    """Text encoder over embedded tokens, decoder emitting dec_len frames.

    Each encoder layer's final hidden state passes through its own linear
    layer before seeding the matching decoder layer. PAD steps leave the
    encoder state untouched.
    """

    prefix = "speak"

    def __init__(self, cfg: SpeakingConfig, vocab: Vocabulary, store: ParamStore | None = None,
                 rng=None, embed_seed: int = 0):
        self.cfg, self.vocab = cfg, vocab
        self.store = store if store is not None else ParamStore()
        H = cfg.hidden
        self.enc = [LstmLayer(self.store, f"speak.enc.layer{k + 1}", H, cfg.embed if k == 0 else H)
                    for k in range(cfg.layers)]
        self.dec = [LstmLayer(self.store, f"speak.dec.layer{k + 1}", H, cfg.dim if k == 0 else H)
                    for k in range(cfg.layers)]
        if store is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            table = np.stack([hashed_row(t, cfg.embed, embed_seed) for t in vocab.tokens])
            table[0] = 0.0
            self.store.add("speak.embed", table)
            for layer in self.enc:
                layer.init(rng)
            for k in range(cfg.layers):
                init_linear(self.store, f"speak.enc.proj{k + 1}", H, H, rng)
            for layer in self.dec:
                layer.init(rng)
            init_linear(self.store, "speak.out", cfg.dim, H, rng)
        elif self.store["speak.embed"].shape != (len(vocab), cfg.embed):
            raise ValueError("embedding table does not match vocabulary/config")

    def token_ids(self, sentences) -> np.ndarray:
        """(B, enc_len) ids from a list of token lists."""
        return np.stack([self.vocab.ids(s, self.cfg.enc_len) for s in sentences])

    def embed(self, ids, tape=None):
        """Row lookup; the PAD row is masked out so it never receives gradient."""
        ids = np.asarray(ids)
        table = _fetch(self.store, "speak.embed", tape)
        rows = ad.getitem(table, ids)
        return ad.mul(rows, (ids != 0)[..., None].astype(np.float64))

    def encode(self, ids, tape=None):
        ids = np.atleast_2d(np.asarray(ids))
        if ids.shape[1] != self.cfg.enc_len:
            raise ValueError(f"token length {ids.shape[1]} != encoder length {self.cfg.enc_len}")
        emb = self.embed(ids, tape)
        xs = [emb[:, t, :] for t in range(ids.shape[1])]
        _, states = run_stack(self.enc, xs, tape=tape, mask=(ids != 0).astype(np.float64))
        return [(linear(self.store, f"speak.enc.proj{k + 1}", h, tape), c)
                for k, (h, c) in enumerate(states)]

    def decode(self, states, gt=None, start=None, tape=None, steps=None):
        steps = self.cfg.dec_len if steps is None else steps
        B = ad.value(states[0][0]).shape[0]
        if start is None:
            start = np.zeros((B, self.cfg.dim))
        if gt is not None:
            gt, _ = _batch(gt)
        return _decode(self.store, self.dec, "speak.out", states, steps, gt, start, tape)

    def forward(self, ids, gt, tape=None):
        return self.decode(self.encode(ids, tape), gt=gt, tape=tape)

    def predict(self, sentences):
        return self.decode(self.encode(self.token_ids(sentences)))

    def encoder_names(self):
        return ["speak.embed"] + self.store.names("speak.enc.")

    def decoder_names(self):
        return self.store.names("speak.dec.") + self.store.names("speak.out.")
