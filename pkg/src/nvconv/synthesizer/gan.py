"""Temporal conditional GAN: losses, training and held-out evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..features import N_AU, NormStats, window
from ..numerics import ParamStore, Tape, ad, adam_step, clip_grad_norm, load_checkpoint, save_checkpoint
from .networks import Discriminator, Generator, PerceptualFeatures, SynthConfig, build_networks
from .render import INVERTIBLE_MASK, StructureNotFound, conditioning_batch, extract_aupose, render_sequence

CLIP_NORM = 5.0


@dataclass
class GanTerms:
    l_gan: object    # E[log D(real)] + E[log(1 - D(fake))]
    l1: object       # mean |G(x) - y|
    perc: object     # perceptual feature distance
    total: object    # w_adv * l_gan + w_l1 * l1 + w_perc * perc
    g_loss: object   # non-saturating generator objective
    d_loss: object   # -l_gan, minimized by the discriminator


def gan_losses(d_real, d_fake, fake, real, cfg: SynthConfig = SynthConfig(), features=None) -> GanTerms:
    """All loss terms from discriminator probabilities.

    ``d_real`` / ``d_fake`` must lie strictly inside (0, 1).
    """
    for name, d in (("real", d_real), ("fake", d_fake)):
        dv = ad.value(d)
        if not np.all((dv > 0.0) & (dv < 1.0)):
            raise ValueError(f"discriminator output on {name} tuples outside (0, 1)")
    log_real = ad.log(d_real)
    log_fake_c = ad.log(ad.sub(1.0, d_fake))
    log_fake = ad.log(d_fake)
    return _combine(log_real, log_fake_c, log_fake, fake, real, cfg, features)


def gan_losses_from_logits(real_logit, fake_logit, fake, real, cfg: SynthConfig = SynthConfig(),
                           features=None) -> GanTerms:
    """Same terms computed stably from logits: log D = log_sigmoid(z), log(1 - D) = log_sigmoid(-z)."""
    return _combine(ad.log_sigmoid(real_logit), ad.log_sigmoid(ad.neg(fake_logit)),
                    ad.log_sigmoid(fake_logit), fake, real, cfg, features)


def _combine(log_real, log_fake_c, log_fake, fake, real, cfg, features):
    features = features if features is not None else PerceptualFeatures(cfg.perceptual_seed)
    l_gan = ad.add(ad.mean(log_real), ad.mean(log_fake_c))
    l1 = ad.mean(ad.absolute(ad.sub(fake, real)))
    perc = features.distance(fake, real)
    total = ad.add(ad.add(ad.mul(l_gan, cfg.w_adv), ad.mul(l1, cfg.w_l1)), ad.mul(perc, cfg.w_perc))
    g_loss = ad.add(ad.add(ad.mul(ad.mean(log_fake), -cfg.w_adv), ad.mul(l1, cfg.w_l1)), ad.mul(perc, cfg.w_perc))
    return GanTerms(l_gan, l1, perc, total, g_loss, ad.neg(l_gan))


# ---------------------------------------------------------------- data

def prepare_sequences(sequences, stats: NormStats, res: int):
    """Stacked conditioning images X and rendered targets Y, each (N, T, res, res)."""
    frames = [np.asarray(getattr(s, "frames", s), dtype=np.float64) for s in sequences]
    if not frames:
        raise ValueError("empty dataset")
    lengths = {len(f) for f in frames}
    if len(lengths) != 1 or min(lengths) < 2:
        raise ValueError("sequences must share one length >= 2")
    X = np.stack([conditioning_batch(f, stats, res) for f in frames])
    Y = np.stack([render_sequence(f, res) for f in frames])
    return X, Y


def dataset_sequences(samples, length: int, split: str = "train"):
    """Non-overlapping windows of both tracks of every sample in ``split``."""
    seqs = []
    for s in samples:
        if s.split == split:
            for track in (s.speaker, s.listener):
                seqs += window(track, length, length) if len(track) >= length else []
    if not seqs:
        raise ValueError(f"no {split} sequences of length {length}")
    return seqs


def _shift(a):
    """Previous frame along the time axis, zero image before the first."""
    return ad.concat([np.zeros_like(ad.value(a)[:, :1]), a[:, :-1]], axis=1)


def rollout(G: Generator, X, tape=None):
    """Generate every frame recursively; the previous output enters detached.

    Returns (B, T, res, res). The first frame sees a zero previous image.
    """
    prev = np.zeros_like(X[:, 0])
    outs = []
    for t in range(X.shape[1]):
        out = G(X[:, t], prev, tape)
        outs.append(out)
        prev = ad.value(out)
    return ad.stack(outs, axis=1)


# ---------------------------------------------------------------- training

@dataclass
class SynthHistory:
    rows: list = field(default_factory=list)  # (step, l_gan, l1, perc, total, g_loss, d_loss)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,l_gan,l1,perc,total,g_loss,d_loss\n")
            for r in self.rows:
                fh.write(",".join([str(r[0])] + [repr(float(v)) for v in r[1:]]) + "\n")


@dataclass
class SynthResult:
    store: object
    G: Generator
    D: Discriminator
    history: SynthHistory


def _terms(D, X, Y, fake, cfg, feats, tape=None):
    xp, yp, fp = _shift(X), _shift(Y), _shift(fake)
    real_logit = D.logit(xp, X, yp, Y, tape)
    fake_logit = D.logit(xp, X, fp, fake, tape)
    return gan_losses_from_logits(real_logit, fake_logit, fake, Y, cfg, feats)


def train_synth(sequences, stats: NormStats, cfg: SynthConfig, log=None, data=None) -> SynthResult:
    """Alternate one discriminator step and one generator step per iteration.

    Each iteration samples ``cfg.batch`` sequences (with replacement),
    rolls the generator over all their frames and builds the tuples
    (x_{t-1}, x_t, y_{t-1}, y_t) against (x_{t-1}, x_t, G_{t-1}, G_t).
    """
    X, Y = data if data is not None else prepare_sequences(sequences, stats, cfg.res)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    store, G, D = build_networks(cfg, np.random.default_rng(seeds[0]))
    rng = np.random.default_rng(seeds[1])
    feats = PerceptualFeatures(cfg.perceptual_seed)
    g_names, d_names = G.names(), D.names()
    history = SynthHistory()
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(len(X), size=cfg.batch)
        xb, yb = X[idx], Y[idx]
        g_tape = Tape()
        fake = rollout(G, xb, g_tape)
        # discriminator: ascend the temporal GAN objective with G's output fixed
        d_tape = Tape()
        d_terms = _terms(D, xb, yb, ad.value(fake), cfg, feats, d_tape)
        d_tape.backward(d_terms.d_loss)
        clip_grad_norm(store, CLIP_NORM, d_names)
        adam_step(store, cfg.lr, beta1=0.5, names=d_names)
        # generator: non-saturating adversarial term plus reconstruction terms
        g_terms = _terms(D, xb, yb, fake, cfg, feats, g_tape)
        g_tape.backward(g_terms.g_loss)
        clip_grad_norm(store, CLIP_NORM, g_names)
        adam_step(store, cfg.lr, beta1=0.5, names=g_names)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            row = (step,) + tuple(float(ad.value(v)) for v in (
                g_terms.l_gan, g_terms.l1, g_terms.perc, g_terms.total, g_terms.g_loss, d_terms.d_loss))
            history.rows.append(row)
            if log is not None:
                log(row)
    return SynthResult(store, G, D, history)


# ---------------------------------------------------------------- evaluation

@dataclass
class SynthEval:
    l1: float
    d_au: float
    d_pose: float
    failures: int
    frames: int


def evaluate_synth(G: Generator, sequences, stats: NormStats, data=None) -> SynthEval:
    """Held-out free rollout: mean |G(x) - y|, and reconstruction error of
    features extracted from G's frames, on invertible dims, in normalized units.

    Frames where no face structure is found are counted in ``failures`` and
    excluded from d_au / d_pose.
    """
    frames = np.stack([np.asarray(getattr(s, "frames", s), dtype=np.float64) for s in sequences])
    X, Y = data if data is not None else prepare_sequences(sequences, stats, G.cfg.res)
    fake = rollout(G, X)
    l1 = float(np.mean(np.abs(fake - Y)))
    au_err, pose_err, failures = [], [], 0
    au_mask = INVERTIBLE_MASK[:N_AU]
    pose_mask = INVERTIBLE_MASK[N_AU:]
    for img, gt in zip(fake.reshape((-1,) + fake.shape[-2:]), frames.reshape(-1, frames.shape[-1])):
        try:
            est, _ = extract_aupose(img)
        except StructureNotFound:
            failures += 1
            continue
        est = np.where(INVERTIBLE_MASK, est, gt)
        err = np.abs(stats.normalize(est) - stats.normalize(gt))
        au_err.append(err[:N_AU][au_mask])
        pose_err.append(err[N_AU:][pose_mask])
    d_au = float(np.mean(au_err)) if au_err else float("nan")
    d_pose = float(np.mean(pose_err)) if pose_err else float("nan")
    return SynthEval(l1, d_au, d_pose, failures, int(np.prod(frames.shape[:2])))


# ---------------------------------------------------------------- checkpoints

def save_synth(path, store: ParamStore, cfg: SynthConfig, stats: NormStats) -> None:
    """Generator and discriminator blocks plus ``stats`` and ``meta.synth``."""
    blocks = dict(store.to_blocks())
    blocks["stats"] = stats.to_array()
    g, d = tuple(cfg.g_widths), tuple(cfg.d_widths)
    blocks["meta.synth"] = np.array([cfg.res, cfg.perceptual_seed, len(g), *g, len(d), *d], dtype=np.float64)
    save_checkpoint(path, blocks)


def load_synth(path):
    """Inverse of :func:`save_synth`; returns (G, D, stats)."""
    blocks = load_checkpoint(path)
    if "meta.synth" not in blocks or "stats" not in blocks:
        raise ValueError(f"{path}: not a synthesizer checkpoint")
    meta = [int(v) for v in blocks.pop("meta.synth")]
    stats = NormStats.from_array(blocks.pop("stats"))
    res, pseed, ng = meta[:3]
    g = tuple(meta[3:3 + ng])
    d = tuple(meta[4 + ng:4 + ng + meta[3 + ng]])
    cfg = SynthConfig(res=res, g_widths=g, d_widths=d, perceptual_seed=pseed)
    store = ParamStore.from_blocks(blocks)
    return Generator(cfg, store), Discriminator(cfg, store), stats
