"""Training loops, the staged speaking schedule, evaluation and checkpoints."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import DIM, NormStats, train_stats
from .losses import LossConfig, continuity_loss, eval_mse_cosine, loss_terms
from .numerics import ParamStore, Tape, adam_step, clip_grad_norm, load_checkpoint, save_checkpoint
from .seqmodels import (
    ListeningConfig, ListeningModel, SpeakingConfig, SpeakingModel, Vocabulary,
)

CLIP_NORM = 5.0
PHASES = ("listening", "speaking")


def read_key_values(text: str) -> dict:
    """``key=value`` lines to a dict of strings; blank lines and ``#`` comments skipped."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        k, v = (part.strip() for part in line.split("=", 1))
        raw[k] = v
    return raw


def convert_fields(cls, raw: dict) -> dict:
    """Convert string values to the dataclass field types; unknown keys are an error."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(types))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    conv = {"float": float, "int": int, "str": str,
            "tuple": lambda v: tuple(int(x) for x in v.split(",") if x.strip())}
    kw = {}
    for k, v in raw.items():
        try:
            kw[k] = conv[types[k]](v) if isinstance(v, str) else v
        except ValueError:
            raise ValueError(f"config key {k}: cannot parse {v!r} as {types[k]}") from None
    return kw


@dataclass
class TrainConfig:
    phase: str = "listening"
    lr: float = 1e-4
    batch: int = 16
    iters: int = 80000
    seed: int = 0
    hidden: int = 32
    layers: int = 4
    n: int = 10
    gamma: float = 8.1
    alpha: float = 0.1
    n_b: int = 3
    exponent: int = 2
    continuity_mean: str = "printed"
    eval_every: int = 100
    stride: int = 1
    embed: int = 16
    enc_len: int = 25
    dec_len: int = 20
    dataset_dir: str = ""
    checkpoint: str = ""

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch < 1 or self.iters < 1:
            raise ValueError("batch and iters must be >= 1")
        if self.eval_every < 1 or self.stride < 1:
            raise ValueError("eval_every and stride must be >= 1")
        self.loss  # validates the loss fields

    @classmethod
    def for_phase(cls, phase: str, **kw) -> "TrainConfig":
        base = dict(phase=phase)
        if phase == "speaking":
            base.update(iters=40000, layers=2)
        base.update(kw)
        return cls(**base)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.gamma, self.alpha, self.n_b, self.exponent, self.continuity_mean)

    def listening(self) -> ListeningConfig:
        return ListeningConfig(self.layers, self.hidden, self.n)

    def speaking(self) -> SpeakingConfig:
        return SpeakingConfig(self.layers, self.hidden, self.embed, self.enc_len, self.dec_len)

    @classmethod
    def parse(cls, text: str, overrides: dict | None = None) -> "TrainConfig":
        """Read ``key=value`` lines; blank lines and ``#`` comments are skipped."""
        raw = read_key_values(text)
        raw.update(overrides or {})
        kw = convert_fields(cls, raw)
        return cls.for_phase(kw.pop("phase", "listening"), **kw)

    @classmethod
    def from_file(cls, path, overrides=None) -> "TrainConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), overrides)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in dataclasses.asdict(self).items())


# ---------------------------------------------------------------- data

def listening_pairs(samples, stats: NormStats, n: int, stride: int = 1):
    """Aligned (speaker window, listener window) pairs, normalized, as (N, n, 20) arrays."""
    xs, ys = [], []
    for s in samples:
        sp, li = stats.normalize(s.speaker.frames), stats.normalize(s.listener.frames)
        for start in range(0, len(sp) - n + 1, stride):
            xs.append(sp[start:start + n])
            ys.append(li[start:start + n])
    if not xs:
        raise ValueError(f"no windows of length {n} in the data")
    return np.stack(xs), np.stack(ys)


def speaking_pairs(samples, stats: NormStats, dec_len: int):
    """(sentence tokens, speaker window starting at the sentence onset) pairs.

    Sentences whose window would run past the end of the track are dropped.
    """
    sents, ys = [], []
    for s in samples:
        sp = stats.normalize(s.speaker.frames)
        for words, onset in zip(s.transcript, s.onsets):
            if onset + dec_len <= len(sp):
                sents.append(list(words))
                ys.append(sp[onset:onset + dec_len])
    if not ys:
        raise ValueError(f"no sentence windows of length {dec_len} in the data")
    return sents, np.stack(ys)


def _train_split(samples):
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    train = [s for s in samples if s.split == "train"]
    if not train:
        raise ValueError("dataset has no train split")
    return train


# ---------------------------------------------------------------- loop

@dataclass
class History:
    rows: list = field(default_factory=list)  # (iter, total, mse, con) at eval points
    losses: list = field(default_factory=list)  # per-iteration batch total

    def write_csv(self, path, append: bool = False):
        p = Path(path)
        new = not (append and p.exists())
        with open(p, "a" if append else "w", encoding="utf-8") as fh:
            if new:
                fh.write("iter,total,mse,con\n")
            for it, t, m, c in self.rows:
                fh.write(f"{it},{t!r},{m!r},{c!r}\n")


@dataclass
class TrainResult:
    model: object
    stats: NormStats
    history: History
    meta: dict = field(default_factory=dict)


def _full_loss(forward, x, y, cfg: LossConfig, cap: int = 256):
    k = min(len(y), cap)
    out = forward(x[:k], y[:k], None)
    t, m, c = loss_terms(y[:k], out, cfg)
    return float(t), float(m), float(c)


def _optimize(store, forward, x, y, cfg: TrainConfig, iters, rng, history, names=None,
              it0: int = 0, log=None):
    """Sample-with-replacement Adam loop shared by every phase and stage."""
    lcfg = cfg.loss
    for it in range(1, iters + 1):
        idx = rng.integers(len(y), size=cfg.batch)
        xb = x[idx] if isinstance(x, np.ndarray) else [x[i] for i in idx]
        tape = Tape()
        total, _, _ = loss_terms(y[idx], forward(xb, y[idx], tape), lcfg)
        tape.backward(total)
        clip_grad_norm(store, CLIP_NORM, names)
        adam_step(store, cfg.lr, names=names)
        history.losses.append(float(total.value))
        step = it0 + it
        if step % cfg.eval_every == 0 or it == iters:
            row = (step,) + _full_loss(forward, x, y, lcfg)
            history.rows.append(row)
            if log is not None:
                log(row)


def train_listening(samples, cfg: TrainConfig, log=None) -> TrainResult:
    train = _train_split(samples)
    stats = train_stats(train)
    x, y = listening_pairs(train, stats, cfg.n, cfg.stride)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    model = ListeningModel(cfg.listening(), rng=np.random.default_rng(seeds[0]))
    history = History()

    def forward(xb, yb, tape):
        return model.forward(xb, yb, tape)

    _optimize(model.store, forward, x, y, cfg, cfg.iters, np.random.default_rng(seeds[1]), history, log=log)
    return TrainResult(model, stats, history, {"pairs": len(y)})


# ---------------------------------------------------------------- speaking schedule

@dataclass(frozen=True)
class Stage:
    name: str
    trainable: frozenset
    frozen: frozenset
    iters: int
    subset: float = 1.0  # fraction of training pairs, seeded selection


class StageSchedule:
    def __init__(self, stages):
        self.stages = list(stages)

    def validate(self, all_names):
        all_names = set(all_names)
        if len(self.stages) != 3:
            raise ValueError("speaking schedule needs exactly 3 stages")
        for st in self.stages:
            if st.trainable & st.frozen:
                raise ValueError(f"stage {st.name}: blocks both trainable and frozen")
            if (st.trainable | st.frozen) != all_names:
                raise ValueError(f"stage {st.name}: every block must be trainable or frozen")
            if st.iters < 1 or not 0 < st.subset <= 1:
                raise ValueError(f"stage {st.name}: bad budget or subset")

    @classmethod
    def default(cls, model: SpeakingModel, iters: int, fractions=(0.1, 0.6, 0.3), subset: float = 0.1):
        names = frozenset(model.store.names())
        enc = frozenset(model.encoder_names())
        budgets = [max(1, int(round(f * iters))) for f in fractions]
        return cls([
            Stage("pretrain", names, frozenset(), budgets[0], subset),
            Stage("decoder", names - enc, enc, budgets[1]),
            Stage("finetune", names, frozenset(), budgets[2]),
        ])

    def describe(self) -> str:
        return ";".join(f"{s.name}:{s.iters}:{s.subset:g}" for s in self.stages)


def train_speaking(samples, cfg: TrainConfig, schedule: StageSchedule | None = None,
                   log=None, checksums: dict | None = None) -> TrainResult:
    """Run the three stages in order.

    ``checksums``, when given, receives ``{stage: (before, after)}`` hashes
    of that stage's frozen blocks.
    """
    train = _train_split(samples)
    stats = train_stats(train)
    sents, y = speaking_pairs(train, stats, cfg.dec_len)
    vocab = Vocabulary(w for s in train for sent in s.transcript for w in sent)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    model = SpeakingModel(cfg.speaking(), vocab, rng=np.random.default_rng(seeds[0]))
    ids = model.token_ids(sents)
    schedule = schedule or StageSchedule.default(model, cfg.iters)
    schedule.validate(model.store.names())
    pick = np.random.default_rng(seeds[1])
    rng = np.random.default_rng(seeds[2])
    history = History()

    def forward(xb, yb, tape):
        return model.forward(np.asarray(xb), yb, tape)

    step = 0
    for st in schedule.stages:
        k = max(1, int(round(st.subset * len(y))))
        sel = np.sort(pick.permutation(len(y))[:k]) if k < len(y) else np.arange(len(y))
        before = model.store.checksum(sorted(st.frozen)) if st.frozen else None
        names = sorted(st.trainable)
        _optimize(model.store, forward, ids[sel], y[sel], cfg, st.iters, rng, history,
                  names=names, it0=step, log=log)
        step += st.iters
        if checksums is not None and st.frozen:
            checksums[st.name] = (before, model.store.checksum(sorted(st.frozen)))
    return TrainResult(model, stats, history, {"pairs": len(y), "schedule": schedule.describe()})


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    d_mse: float
    d_cos: float
    continuity: float
    count: int
    predictions: np.ndarray


def evaluate(model, stats: NormStats, samples, cfg: TrainConfig | None = None,
             loss_cfg: LossConfig | None = None) -> EvalResult:
    """Free-running metrics in normalized units, plus prediction continuity."""
    loss_cfg = loss_cfg or (cfg.loss if cfg else LossConfig())
    samples = list(samples)
    if not samples:
        raise ValueError("nothing to evaluate")
    if isinstance(model, ListeningModel):
        x, y = listening_pairs(samples, stats, model.cfg.n, cfg.stride if cfg else 1)
        pred = model.predict(x)
    else:
        sents, y = speaking_pairs(samples, stats, model.cfg.dec_len)
        pred = model.predict(sents)
    d_mse, d_cos = eval_mse_cosine(list(y), list(pred), loss_cfg.exponent)
    con = float(continuity_loss(y, pred, loss_cfg))
    return EvalResult(d_mse, d_cos, con, len(y), pred)


# ---------------------------------------------------------------- checkpoints

def save_model(path, model, stats: NormStats) -> None:
    """Parameters plus ``stats`` and ``meta.*`` blocks; speaking adds ``<path>.vocab``."""
    blocks = dict(model.store.to_blocks())
    blocks["stats"] = stats.to_array()
    c = model.cfg
    if isinstance(model, ListeningModel):
        blocks["meta.listening"] = np.array([c.layers, c.hidden, c.n], dtype=np.float64)
    else:
        blocks["meta.speaking"] = np.array([c.layers, c.hidden, c.embed, c.enc_len, c.dec_len],
                                           dtype=np.float64)
        model.vocab.save(str(path) + ".vocab")
    save_checkpoint(path, blocks)


def load_model(path):
    """Inverse of :func:`save_model`; returns (model, stats)."""
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blocks = load_checkpoint(path)
    if "stats" not in blocks:
        raise ValueError(f"{path}: checkpoint has no stats block")
    stats = NormStats.from_array(blocks.pop("stats"))
    if "meta.listening" in blocks:
        layers, hidden, n = (int(v) for v in blocks.pop("meta.listening"))
        store = ParamStore.from_blocks(blocks)
        return ListeningModel(ListeningConfig(layers, hidden, n), store=store), stats
    if "meta.speaking" in blocks:
        layers, hidden, embed, enc_len, dec_len = (int(v) for v in blocks.pop("meta.speaking"))
        vocab = Vocabulary.load(str(path) + ".vocab")
        store = ParamStore.from_blocks(blocks)
        return SpeakingModel(SpeakingConfig(layers, hidden, embed, enc_len, dec_len), vocab, store=store), stats
    raise ValueError(f"{path}: checkpoint has no model metadata")


def denormalize_sequence(stats: NormStats, frames) -> np.ndarray:
    return stats.denormalize(np.asarray(frames, dtype=np.float64).reshape(-1, DIM)).reshape(np.shape(frames))
