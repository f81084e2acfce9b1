"""AU+POSE frames, normalization, CSV/dataset I/O and synthetic conversations.

A frame is a 20-vector: 17 action-unit intensities followed by the three
head rotation angles. Sequences are stored as ``(T, 20)`` float64 arrays.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

AU_NAMES = ("AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU10", "AU12",
            "AU14", "AU15", "AU17", "AU20", "AU23", "AU25", "AU26", "AU45")
POSE_NAMES = ("pose_Rx", "pose_Ry", "pose_Rz")
N_AU = len(AU_NAMES)
N_POSE = len(POSE_NAMES)
DIM = N_AU + N_POSE
COLUMNS = tuple(f"{a}_r" for a in AU_NAMES) + POSE_NAMES
CSV_HEADER = ("frame",) + COLUMNS
DEFAULT_FPS = 25.0

NATIVE_MIN = np.array([0.0] * N_AU + [-math.pi / 2] * N_POSE)
NATIVE_MAX = np.array([5.0] * N_AU + [math.pi / 2] * N_POSE)

SPLITS = ("train", "val", "test")


def au_index(name: str) -> int:
    return AU_NAMES.index(name)


class CsvFormatError(ValueError):
    def __init__(self, path, row, column, message):
        self.row = row
        self.column = column
        where = f"row {row}" + (f", column {column}" if column else "")
        super().__init__(f"{path}: {where}: {message}")


@dataclass(frozen=True)
class AuPose:
    au: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        au = np.asarray(self.au, dtype=np.float64)
        pose = np.asarray(self.pose, dtype=np.float64)
        if au.shape != (N_AU,) or pose.shape != (N_POSE,):
            raise ValueError(f"AuPose needs {N_AU} AUs and {N_POSE} pose angles")
        if not (np.all(np.isfinite(au)) and np.all(np.isfinite(pose))):
            raise ValueError("AuPose values must be finite")
        object.__setattr__(self, "au", au)
        object.__setattr__(self, "pose", pose)

    @classmethod
    def from_vector(cls, v) -> "AuPose":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:N_AU], v[N_AU:])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.au, self.pose])


@dataclass
class AuPoseSequence:
    frames: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != DIM or len(self.frames) == 0:
            raise ValueError(f"sequence must be a non-empty (T, {DIM}) array, got {self.frames.shape}")
        if not self.fps > 0:
            raise ValueError("fps must be positive")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i) -> AuPose:
        return AuPose.from_vector(self.frames[i])


@dataclass
class NormStats:
    """Per-dimension min/max of the training split."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)
        if self.min.shape != (DIM,) or self.max.shape != (DIM,):
            raise ValueError("NormStats needs 20 minima and 20 maxima")
        if np.any(self.min > self.max):
            raise ValueError("NormStats min exceeds max")

    @classmethod
    def from_frames(cls, frames) -> "NormStats":
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, DIM)
        return cls(frames.min(axis=0), frames.max(axis=0))

    @property
    def degenerate(self) -> np.ndarray:
        return (self.max - self.min) < 1e-9

    def normalize(self, x) -> np.ndarray:
        # values outside the training range are deliberately not clamped
        x = np.asarray(x, dtype=np.float64)
        span = np.where(self.degenerate, 1.0, self.max - self.min)
        return np.where(self.degenerate, 0.5, (x - self.min) / span)

    def denormalize(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return np.where(self.degenerate, self.min, self.min + z * (self.max - self.min))

    def to_array(self) -> np.ndarray:
        return np.stack([self.min, self.max])

    @classmethod
    def from_array(cls, arr) -> "NormStats":
        arr = np.asarray(arr)
        return cls(arr[0], arr[1])

    def save(self, path) -> None:
        lines = [f"{name} min={lo!r} max={hi!r}" for name, lo, hi
                 in zip(COLUMNS, self.min.tolist(), self.max.tolist())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormStats":
        lo, hi = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            _, a, b = line.split()
            lo.append(float(a.split("=", 1)[1]))
            hi.append(float(b.split("=", 1)[1]))
        return cls(lo, hi)


def clamp_native(frames) -> np.ndarray:
    return np.clip(frames, NATIVE_MIN, NATIVE_MAX)


# ---------------------------------------------------------------- CSV

def write_csv(path, seq: AuPoseSequence) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for i, row in enumerate(seq.frames.tolist()):
            fh.write(str(i) + "," + ",".join(repr(v) for v in row) + "\n")


def read_meta(path) -> dict[str, str]:
    meta = {}
    path = Path(path)
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                key, _, val = line.partition("=")
                meta[key.strip()] = val.strip()
    return meta


def ingest_csv(path, fps: float | None = None) -> AuPoseSequence:
    """Read an AU+POSE CSV. Rows are numbered from 1 (first data row)."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(path, 0, None, "empty file")
    header = [h.strip() for h in rows[0]]
    for col in CSV_HEADER:
        if col not in header:
            raise CsvFormatError(path, 0, col, "missing column")
    if tuple(header) != CSV_HEADER:
        raise CsvFormatError(path, 0, None, "header does not match the AU+POSE column order")
    body = [r for r in rows[1:] if any(c.strip() for c in r)]
    if not body:
        raise CsvFormatError(path, 0, None, "no data rows")
    frames = np.empty((len(body), DIM))
    for i, row in enumerate(body, start=1):
        if len(row) != len(CSV_HEADER):
            raise CsvFormatError(path, i, None, f"expected {len(CSV_HEADER)} cells, got {len(row)}")
        try:
            idx = int(row[0])
        except ValueError:
            raise CsvFormatError(path, i, "frame", f"bad frame index {row[0]!r}") from None
        if idx != i - 1:
            raise CsvFormatError(path, i, "frame", f"frame index {idx} out of order")
        for j, cell in enumerate(row[1:]):
            try:
                val = float(cell)
            except ValueError:
                val = math.nan
            if not math.isfinite(val):
                raise CsvFormatError(path, i, COLUMNS[j], f"non-numeric value {cell!r}")
            frames[i - 1, j] = val
    if fps is None:
        fps = float(read_meta(path.parent / "meta.txt").get("fps", DEFAULT_FPS))
    return AuPoseSequence(frames, fps)


# ---------------------------------------------------------------- windows

def window(seq: AuPoseSequence, length: int, stride: int = 1) -> list[AuPoseSequence]:
    if length < 1 or stride < 1:
        raise ValueError("window length and stride must be >= 1")
    return [AuPoseSequence(seq.frames[s:s + length], seq.fps)
            for s in range(0, len(seq) - length + 1, stride)]


# ---------------------------------------------------------------- synthetic data

AFFIRM = ("yes", "right", "sure", "exactly", "agree", "true", "okay")
POSITIVE = ("great", "love", "happy", "funny", "good", "amazing", "win")
NEGATIVE = ("no", "never", "bad", "wrong", "lose", "terrible")
SURPRISE = ("what", "really", "wow", "seriously", "how")
NEUTRAL = ("the", "a", "he", "she", "they", "game", "team", "season", "play", "think",
           "said", "last", "night", "was", "is", "that", "this", "about", "coach", "ball",
           "points", "year", "going", "to", "and", "of")
VOCABULARY = AFFIRM + POSITIVE + NEGATIVE + SURPRISE + NEUTRAL

MAX_STEP = 0.28  # per-frame rate limit, native units
TOKEN_SECONDS = 0.32
SENTENCE_GAP_SECONDS = 0.4

_I = {name: au_index(name) for name in AU_NAMES}
RX, RY, RZ = N_AU, N_AU + 1, N_AU + 2
# channels the listener mirrors from the speaker's expressive events
MIRRORED = [_I["AU01"], _I["AU02"], _I["AU04"], _I["AU06"], _I["AU12"], RX]


@dataclass
class ConversationSample:
    speaker: AuPoseSequence
    listener: AuPoseSequence
    transcript: list[list[str]]
    split: str = "train"
    onsets: list[int] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.speaker) != len(self.listener):
            raise ValueError("speaker and listener tracks must have equal length")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


def _bump(n_frames: int, start: int, duration: int, amplitude: float) -> np.ndarray:
    out = np.zeros(n_frames)
    k = np.arange(duration + 1)
    idx = start + k
    keep = (idx >= 0) & (idx < n_frames)
    out[idx[keep]] = amplitude * 0.5 * (1.0 - np.cos(2 * np.pi * k[keep] / duration))
    return out


def _token_rng(token: str) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(token.encode("utf-8")))


def _rate_limit(x: np.ndarray, max_step: float) -> np.ndarray:
    y = np.empty_like(x)
    y[0] = x[0]
    for t in range(1, len(x)):
        y[t] = y[t - 1] + np.clip(x[t] - y[t - 1], -max_step, max_step)
    return y


def _sentence(rng: np.random.Generator) -> list[str]:
    n = int(rng.integers(4, 13))
    words = []
    for _ in range(n):
        group = rng.choice(5, p=[0.12, 0.14, 0.1, 0.08, 0.56])
        pool = (AFFIRM, POSITIVE, NEGATIVE, SURPRISE, NEUTRAL)[group]
        words.append(str(pool[rng.integers(len(pool))]))
    return words


def _baseline(rng, n_frames, fps, scale):
    t = np.arange(n_frames) / fps
    out = np.empty((n_frames, DIM))
    out[:, :N_AU] = rng.uniform(0.2, 1.2, size=N_AU) * scale
    out[:, N_AU:] = rng.normal(0.0, 0.05, size=N_POSE)
    for d in range(DIM):
        amp_hi = 0.25 if d < N_AU else 0.06
        for _ in range(int(rng.integers(2, 5))):
            f = rng.uniform(0.05, 0.4)
            a = rng.uniform(0.2, 1.0) * amp_hi * scale
            out[:, d] += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return out


def _smooth_noise(rng, n_frames, sigma, width=5):
    raw = rng.normal(0.0, sigma, size=(n_frames + width - 1, DIM))
    kernel = np.ones(width) / width
    return np.stack([np.convolve(raw[:, d], kernel, mode="valid") for d in range(DIM)], axis=1)


def synth_conversation(seed: int, n_frames: int, fps: float = DEFAULT_FPS, lag: int = 7,
                       attenuation: float = 0.55, split: str = "train") -> ConversationSample:
    """Deterministic speaker/listener pair driven by a seeded transcript.

    Speaker AUs are seeded sinusoids plus bumps triggered by the words being
    spoken (nods for agreement, smiles for positive words, brow lowering and
    head shakes for negative ones, brow raises for surprise) and random
    blinks. The listener mirrors the speaker's expressive bumps ``lag``
    frames later, scaled by ``attenuation``, on top of its own baseline and
    smoothed noise.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if not 5 <= lag <= 10 or not 0.4 <= attenuation <= 0.7:
        raise ValueError("lag must lie in [5, 10] and attenuation in [0.4, 0.7]")
    rng = np.random.default_rng(seed)
    tok_frames = max(1, round(TOKEN_SECONDS * fps))
    gap = max(1, round(SENTENCE_GAP_SECONDS * fps))
    bump_len = max(2, round(1.2 * fps))
    nod_len = max(2, round(0.8 * fps))

    transcript, onsets = [], []
    t = 0
    while t < n_frames:
        words = _sentence(rng)
        transcript.append(words)
        onsets.append(t)
        t += len(words) * tok_frames + gap

    events = np.zeros((n_frames, DIM))
    talk = np.zeros(n_frames)
    time = np.arange(n_frames) / fps
    for words, onset in zip(transcript, onsets):
        start, stop = onset, min(n_frames, onset + len(words) * tok_frames)
        talk[start:stop] = 1.0
        for k, w in enumerate(words):
            s = onset + k * tok_frames
            a = _token_rng(w).uniform(0.6, 1.0)
            if w in AFFIRM:
                events[:, RX] += _bump(n_frames, s, nod_len, 0.2 * a)
            elif w in POSITIVE:
                events[:, _I["AU12"]] += _bump(n_frames, s, bump_len, 1.4 * a)
                events[:, _I["AU06"]] += _bump(n_frames, s, bump_len, 0.8 * a)
            elif w in NEGATIVE:
                events[:, _I["AU04"]] += _bump(n_frames, s, bump_len, 1.2 * a)
                events[:, _I["AU15"]] += _bump(n_frames, s, bump_len, 0.5 * a)
                shake = _bump(n_frames, s, bump_len, 1.0) * np.sin(2 * np.pi * 1.5 * (time - s / fps))
                events[:, RY] += 0.12 * a * shake
            elif w in SURPRISE:
                events[:, _I["AU01"]] += _bump(n_frames, s, bump_len, 1.2 * a)
                events[:, _I["AU02"]] += _bump(n_frames, s, bump_len, 1.0 * a)
                events[:, _I["AU05"]] += _bump(n_frames, s, bump_len, 0.6 * a)
            else:
                sig = _token_rng(w)
                dims = sig.choice(N_AU, size=2, replace=False)
                for d in dims:
                    events[:, d] += _bump(n_frames, s, bump_len, 0.35 * sig.uniform(0.5, 1.0))

    speaker = _baseline(rng, n_frames, fps, 1.0) + events
    ramp = max(1, round(0.4 * fps))
    talk = np.convolve(talk, np.ones(ramp) / ramp)[:n_frames]
    mouth = talk * 0.5 * (1.0 - np.cos(2 * np.pi * 1.5 * time))
    speaker[:, _I["AU25"]] += 0.5 * mouth
    speaker[:, _I["AU26"]] += 0.3 * mouth
    blink_len = max(2, round(0.8 * fps))
    for _ in range(int(rng.poisson(0.25 * n_frames / fps))):
        speaker[:, _I["AU45"]] += _bump(n_frames, int(rng.integers(n_frames)), blink_len, rng.uniform(0.9, 1.3))

    listener = _baseline(rng, n_frames, fps, 0.6) + _smooth_noise(rng, n_frames, 0.04)
    shifted = np.zeros_like(events)
    if lag < n_frames:
        shifted[lag:] = events[:n_frames - lag]
    listener[:, MIRRORED] += attenuation * shifted[:, MIRRORED]
    for _ in range(int(rng.poisson(0.25 * n_frames / fps))):
        listener[:, _I["AU45"]] += _bump(n_frames, int(rng.integers(n_frames)), blink_len, rng.uniform(0.9, 1.3))

    speaker = clamp_native(_rate_limit(speaker, MAX_STEP))
    listener = clamp_native(_rate_limit(listener, MAX_STEP))
    meta = {"fps": _fmt_num(fps), "split": split, "seed": str(seed), "lag": str(lag),
            "attenuation": repr(float(attenuation))}
    return ConversationSample(AuPoseSequence(speaker, fps), AuPoseSequence(listener, fps),
                              transcript, split, onsets, meta)


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


# ---------------------------------------------------------------- dataset directories

def write_sample(directory, sample: ConversationSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_csv(d / "speaker.csv", sample.speaker)
    write_csv(d / "listener.csv", sample.listener)
    (d / "transcript.txt").write_text("".join(" ".join(s) + "\n" for s in sample.transcript), encoding="utf-8")
    meta = dict(sample.meta)
    meta["fps"] = _fmt_num(sample.speaker.fps)
    meta["split"] = sample.split
    if sample.onsets:
        meta["onsets"] = " ".join(map(str, sample.onsets))
    (d / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")


def read_transcript(path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    return [line.split(" ") if line else [] for line in text.splitlines()]


def read_sample(directory) -> ConversationSample:
    d = Path(directory)
    meta = read_meta(d / "meta.txt")
    fps = float(meta.get("fps", DEFAULT_FPS))
    speaker = ingest_csv(d / "speaker.csv", fps)
    listener = ingest_csv(d / "listener.csv", fps)
    transcript = read_transcript(d / "transcript.txt") if (d / "transcript.txt").exists() else []
    onsets = [int(x) for x in meta.get("onsets", "").split()]
    return ConversationSample(speaker, listener, transcript, meta.get("split", "train"), onsets, meta)


def load_dataset(directory) -> list[ConversationSample]:
    d = Path(directory)
    subdirs = sorted(p for p in d.iterdir() if p.is_dir() and (p / "speaker.csv").exists())
    if not subdirs:
        raise FileNotFoundError(f"no samples under {d}")
    return [read_sample(p) for p in subdirs]


def split_assignment(n: int, rng: np.random.Generator) -> list[str]:
    """80/10/10 split by seeded shuffle; val and test get n // 10 samples each."""
    n_hold = n // 10
    order = rng.permutation(n)
    tags = ["train"] * n
    for i in order[:n_hold]:
        tags[i] = "val"
    for i in order[n_hold:2 * n_hold]:
        tags[i] = "test"
    return tags


def generate_dataset(directory, n_samples: int, n_frames: int, seed: int,
                     fps: float = DEFAULT_FPS) -> NormStats:
    """Write ``n_samples`` sample directories plus ``stats.txt`` from the train split."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_samples + 1)
    tags = split_assignment(n_samples, np.random.default_rng(children[0]))
    sample_seeds = [int(c.generate_state(1)[0]) for c in children[1:]]
    train_frames = []
    for i, (tag, s) in enumerate(zip(tags, sample_seeds)):
        sample = synth_conversation(s, n_frames, fps, split=tag)
        write_sample(d / f"sample_{i:04d}", sample)
        if tag == "train":
            train_frames += [sample.speaker.frames, sample.listener.frames]
    stats = NormStats.from_frames(np.concatenate(train_frames))
    stats.save(d / "stats.txt")
    return stats


def train_stats(samples) -> NormStats:
    frames = [f for s in samples if s.split == "train" for f in (s.speaker.frames, s.listener.frames)]
    if not frames:
        raise ValueError("no training samples to compute normalization from")
    return NormStats.from_frames(np.concatenate(frames))
