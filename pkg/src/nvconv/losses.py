"""Training losses and evaluation metrics over AU+POSE frame sequences.

Sequences are ``(..., T, 20)``. The training losses are built from
:mod:`nvconv.numerics.autodiff` ops, so they return a float-like array for
plain inputs and a recorded value when ``pred`` lives on a tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import DIM, N_AU, N_POSE
from .numerics import ad


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 8.1
    alpha: float = 0.1
    n_b: int = 3
    exponent: int = 2
    continuity_mean: str = "printed"  # "printed": divide by n_b; "frames": by the number of terms

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.n_b < 2:
            raise ValueError("n_b must be >= 2")
        if self.exponent not in (1, 2):
            raise ValueError("exponent must be 1 or 2")
        if self.continuity_mean not in ("printed", "frames"):
            raise ValueError("continuity_mean must be 'printed' or 'frames'")


def _check_pair(gt, pred):
    gs, ps = ad.value(gt).shape, ad.value(pred).shape
    if gs != ps:
        raise ValueError(f"ground truth and prediction differ in shape: {gs} vs {ps}")
    if gs[-1] != DIM:
        raise ValueError(f"frames must be {DIM}-D, got {gs[-1]}")


def _power(x, exponent):
    return ad.square(x) if exponent == 2 else ad.absolute(x)


def _frame_mse(gt, pred, gamma, exponent):
    diff = ad.sub(pred, gt)
    au = ad.sum(_power(diff[..., :N_AU], exponent), axis=-1)
    pose = ad.sum(_power(diff[..., N_AU:], exponent), axis=-1)
    return au * (1.0 / N_AU) + pose * (gamma / N_POSE)


def mse_loss(gt, pred, cfg: LossConfig = LossConfig()):
    """Weighted per-frame error, AU and pose terms averaged separately, mean over frames."""
    _check_pair(gt, pred)
    return ad.mean(_frame_mse(gt, pred, cfg.gamma, cfg.exponent))


def continuity_loss(gt, pred, cfg: LossConfig = LossConfig()):
    """Largest mismatch of frame-to-frame deltas over the trailing ``n_b - 1`` steps.

    With frames y^0..y^{l-1}, term i (n_b <= i <= l-1) takes the max over
    j = 1..n_b-1 of ||d_gt(i-j) - d_pred(i-j)||, where d(k) = y^k - y^{k-1}.
    The sum over i is divided by n_b (or by its number of terms when
    ``continuity_mean == "frames"``), then averaged over any batch axes.
    """
    _check_pair(gt, pred)
    n_b = cfg.n_b
    length = ad.value(gt).shape[-2]
    if length < n_b:
        raise ValueError(f"sequence length {length} shorter than n_b={n_b}")
    if length == n_b:
        return ad.mul(ad.sum(ad.sub(pred, pred)), 0.0)
    err = ad.sub(pred, gt)
    dd = ad.sub(err[..., 1:, :], err[..., :-1, :])  # dd[k] pairs frames k+1 and k
    norms = ad.sqrt(ad.sum(ad.square(dd), axis=-1))
    # term i, lag j reads dd[i - j - 1]
    cols = [norms[..., n_b - j - 1:length - j - 1] for j in range(1, n_b)]
    worst = ad.amax(ad.stack(cols, axis=-1), axis=-1)
    per_seq = ad.sum(worst, axis=-1)
    denom = n_b if cfg.continuity_mean == "printed" else length - n_b
    return ad.mean(per_seq) * (1.0 / denom)


def loss_terms(gt, pred, cfg: LossConfig = LossConfig()):
    """(total, mse, continuity); total = mse + alpha * continuity."""
    mse = mse_loss(gt, pred, cfg)
    con = continuity_loss(gt, pred, cfg)
    return ad.add(mse, ad.mul(con, cfg.alpha)), mse, con


def total_loss(gt, pred, cfg: LossConfig = LossConfig()):
    return loss_terms(gt, pred, cfg)[0]


def _as_list(seqs):
    if isinstance(seqs, np.ndarray) and seqs.ndim == 2:
        return [seqs]
    return [np.asarray(getattr(s, "frames", s), dtype=np.float64) for s in seqs]


def eval_mse_cosine(gt_seqs, pred_seqs, exponent: int = 2) -> tuple[float, float]:
    """Unweighted MSE (pose weight 1) and mean per-frame cosine similarity.

    The MSE is averaged within each sequence, then across sequences. Cosine
    similarity with a zero vector counts as 0.
    """
    gts, preds = _as_list(gt_seqs), _as_list(pred_seqs)
    if not gts or len(gts) != len(preds):
        raise ValueError("need matching, non-empty sets of sequences")
    mses, cosines = [], []
    for g, p in zip(gts, preds):
        _check_pair(g, p)
        mses.append(float(np.mean(_frame_mse(g, p, 1.0, exponent))))
        num = np.sum(g * p, axis=-1)
        den = np.linalg.norm(g, axis=-1) * np.linalg.norm(p, axis=-1)
        cosines.append(np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0))
    return float(np.mean(mses)), float(np.mean(np.concatenate(cosines)))


def reconstruction_error(gt_seqs, rec_seqs, mask=None) -> tuple[float, float]:
    """Mean absolute AU error and mean absolute pose error over all frames.

    ``mask`` is an optional boolean 20-vector restricting which dimensions
    count (e.g. the ones an image extractor can recover).
    """
    gts, recs = _as_list(gt_seqs), _as_list(rec_seqs)
    if not gts or len(gts) != len(recs):
        raise ValueError("need matching, non-empty sets of sequences")
    for g, r in zip(gts, recs):
        _check_pair(g, r)
    err = np.abs(np.concatenate(gts) - np.concatenate(recs))
    mask = np.ones(DIM, bool) if mask is None else np.asarray(mask, bool)
    au = mask[:N_AU]
    pose = mask[N_AU:]
    d_au = float(err[:, :N_AU][:, au].mean()) if au.any() else float("nan")
    d_pose = float(err[:, N_AU:][:, pose].mean()) if pose.any() else float("nan")
    return d_au, d_pose
