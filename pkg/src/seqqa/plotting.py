"""Loss-curve and attention figures written to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import LossCurve  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _axes_curve(ax, curve: LossCurve, title: str | None = None) -> None:
    epochs = [r.epoch for r in curve.records]
    ax.plot(epochs, [r.train_loss for r in curve.records], label="train", color="tab:blue")
    ax.plot(epochs, [r.val_loss for r in curve.records], label="validation", color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)


def plot_loss_curve(curve: LossCurve, path: str | Path, title: str | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        _axes_curve(ax, curve, title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_length_panels(curves: Mapping[int, LossCurve], path: str | Path, title: str) -> Path:
    """One panel per truncation length, side by side."""
    keys = sorted(curves)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=(3.6 * len(keys), 3.0), squeeze=False)
        for ax, k in zip(axes[0], keys):
            _axes_curve(ax, curves[k], f"sequence length {k}")
        fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_attention(
    weights: np.ndarray, src_tokens: Sequence[str], out_tokens: Sequence[str], path: str | Path
) -> Path:
    """Heatmap of decode steps (rows) against source positions (columns)."""
    w = np.asarray(weights)[: len(out_tokens), : len(src_tokens)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 0.18 * len(src_tokens) + 1.5),
                                        max(2.5, 0.18 * len(out_tokens) + 1.2)))
        im = ax.imshow(w, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
        ax.set_xticks(range(len(src_tokens)), [t if t != " " else "␣" for t in src_tokens], fontsize=6)
        ax.set_yticks(range(len(out_tokens)), [t if t != " " else "␣" for t in out_tokens], fontsize=6)
        ax.set_xlabel("source position")
        ax.set_ylabel("decode step")
        fig.colorbar(im, ax=ax, fraction=0.05)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
