"""Deterministic PNG figures: loss curves and AU+POSE tracks.

Figures are drawn with the Agg backend and saved without the software or
date metadata, so the same inputs give byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .features import COLUMNS  # noqa: E402

_SAVE = dict(dpi=80, format="png", metadata={"Software": None})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_losses(steps, series: dict, path, title: str = "training loss", log_y: bool = True):
    """One line per named series against ``steps``."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, vals in series.items():
        vals = np.asarray(vals, dtype=np.float64)
        if log_y:
            vals = np.where(vals > 0, vals, np.nan)
        ax.plot(steps, vals, label=name, linewidth=1.2)
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_history(history, path, title: str = "training loss"):
    """Loss curves from a sequence-model history (iter, total, mse, con)."""
    rows = np.asarray(history.rows, dtype=np.float64).reshape(-1, 4)
    plot_losses(rows[:, 0], {"total": rows[:, 1], "mse": rows[:, 2], "con": rows[:, 3]}, path, title)


def plot_synth_history(history, path, title: str = "synthesizer loss"):
    rows = np.asarray(history.rows, dtype=np.float64).reshape(-1, 7)
    plot_losses(rows[:, 0], {"l1": rows[:, 2], "perc": rows[:, 3], "g_loss": rows[:, 5],
                             "d_loss": rows[:, 6]}, path, title, log_y=False)


def plot_tracks(frames, path, dims=(0, 1, 2, 8, 14, 15), reference=None, title: str = "AU tracks"):
    """Selected dimensions of a (T, 20) track; ``reference`` is drawn dashed."""
    frames = np.asarray(frames, dtype=np.float64)
    fig, axes = plt.subplots(len(dims), 1, figsize=(6, 1.2 * len(dims) + 0.6), sharex=True)
    axes = np.atleast_1d(axes)
    t = np.arange(len(frames))
    for ax, d in zip(axes, dims):
        ax.plot(t, frames[:, d], linewidth=1.2, label="output")
        if reference is not None:
            ax.plot(t, np.asarray(reference)[:, d], "--", linewidth=1.0, label="reference")
        ax.set_ylabel(COLUMNS[d], fontsize=7)
        ax.tick_params(labelsize=7)
    axes[0].set_title(title)
    if reference is not None:
        axes[0].legend(loc="upper right", fontsize=7)
    axes[-1].set_xlabel("frame")
    _save(fig, path)
