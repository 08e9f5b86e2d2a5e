"""Static accuracy-FLOPs figures rendered next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_frontiers(curves, path, title="Accuracy vs MFLOPs"):
    """Overlay one frontier per (label, rows) pair and write a PNG."""
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for label, rows in curves:
        xs = [r.mflops for r in rows]
        ys = [r.top1 * 100 for r in rows]
        ax.plot(xs, ys, marker="o", markersize=3.5, linewidth=1.2, label=label)
    ax.set_xlabel("MFLOPs")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_title(title)
    ax.grid(True, linestyle=":", linewidth=0.6)
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=150)
    plt.close(fig)


def plot_training_curves(histories, path, title="Training loss"):
    """Loss-per-epoch curves for one or more labelled runs."""
    fig, ax = plt.subplots(figsize=(6, 4.2))
    for label, history in histories:
        ax.plot(
            [m.epoch for m in history],
            [m.loss_total for m in history],
            linewidth=1.2,
            label=label,
        )
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean step loss")
    ax.set_title(title)
    ax.grid(True, linestyle=":", linewidth=0.6)
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path), dpi=150)
    plt.close(fig)
