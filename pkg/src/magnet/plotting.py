"""Report figures: training curves, confusion matrix, mask overlay."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

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
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(history, path):
    """Loss curves on the left, validation dice / accuracy on the right."""
    epochs = history.column("epoch")
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_score) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        ax_loss.plot(epochs, history.column("train_loss"), label="train")
        ax_loss.plot(epochs, history.column("val_loss"), label="validation")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("BCE + CE loss")
        ax_loss.legend(frameon=False)
        ax_score.plot(epochs, history.column("val_dice"), label="dice")
        ax_score.plot(epochs, history.column("val_acc"), label="accuracy")
        ax_score.set_ylim(0, 1.02)
        ax_score.set_xlabel("epoch")
        ax_score.legend(frameon=False, loc="lower right")
        if history.best_epoch:
            for ax in (ax_loss, ax_score):
                ax.axvline(history.best_epoch, color="0.6", lw=0.8, ls="--")
        fig.tight_layout()
        return _save(fig, path)


def plot_confusion(counts, class_names, path):
    counts = np.asarray(counts)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        ax.imshow(counts, cmap="Blues")
        ticks = range(len(class_names))
        ax.set_xticks(ticks, class_names, rotation=30, ha="right")
        ax.set_yticks(ticks, class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        peak = counts.max() if counts.size else 0
        for (r, c), v in np.ndenumerate(counts):
            ax.text(c, r, str(v), ha="center", va="center", color="white" if v > peak / 2 else "black")
        return _save(fig, path)


def plot_overlay(image, mask, path, title=None):
    """Input slice in grayscale with the predicted mask boundary traced on top."""
    image = np.asarray(image).squeeze()
    mask = np.asarray(mask).squeeze()
    h, w = image.shape
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(2.0, w / 32), max(2.0, h / 32)))
        ax.imshow(image, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        if mask.any() and not mask.all():
            ax.contour(mask.astype(float), levels=[0.5], colors="red", linewidths=1.0)
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, path)
