"""Static plots of epoch logs; never needs a display."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .logs import EpochLog, PretrainLog  # noqa: E402


def comparison_figure(log_a: EpochLog, log_b: EpochLog, labels=("A", "B"), unfreeze_epoch=None):
    """2x2 grid: model A on the left, B on the right; loss on top, accuracy below."""
    fig, axes = plt.subplots(2, 2, figsize=(10, 7), sharex=True)
    for col, (log, label) in enumerate(zip((log_a, log_b), labels)):
        for row, kind in enumerate(("loss", "acc")):
            ax = axes[row, col]
            for split, style in (("train", "-"), ("val", "--")):
                epochs, values = zip(*log.series(f"{split}_{kind}"))
                ax.plot(epochs, values, style, label=split)
            if unfreeze_epoch is not None:
                ax.axvline(unfreeze_epoch, color="grey", lw=0.8, ls=":")
            ax.set_title(f"Model {label}: {'loss' if kind == 'loss' else 'accuracy'}")
            ax.set_ylabel(kind)
            ax.legend(loc="best", fontsize=8)
            if row == 1:
                ax.set_xlabel("epoch")
    fig.tight_layout()
    return fig


def plot_comparison(log_a: EpochLog, log_b: EpochLog, path: str | Path, labels=("A", "B"), unfreeze_epoch=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig = comparison_figure(log_a, log_b, labels, unfreeze_epoch)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_pretrain(plog: PretrainLog, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [r.epoch for r in plog.rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax1.plot(epochs, [r.train_recon for r in plog.rows], label="train recon")
    ax1.plot(epochs, [r.val_recon for r in plog.rows], "--", label="val recon")
    ax1.set_xlabel("epoch")
    ax1.legend()
    ax2.plot(epochs, [r.train_kl for r in plog.rows], label="train KL")
    ax2b = ax2.twinx()
    ax2b.plot(epochs, [r.beta for r in plog.rows], color="grey", ls=":", label="beta")
    ax2.set_xlabel("epoch")
    ax2.legend(loc="upper left")
    ax2b.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
