"""Matplotlib figures written next to the machine-readable outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("loss_total", "loss_softmax", "loss_sasc", "loss_sadc", "loss_dasc")


def loss_curve(records: list[dict], path, smooth: int = 10) -> None:
    """Per-step losses (moving average) with held-out top-1 on a twin axis."""
    steps = np.array([r["step"] for r in records])
    fig, ax = plt.subplots(figsize=(7, 4))
    k = max(1, min(smooth, len(records)))
    kernel = np.ones(k) / k
    for key in LOSS_KEYS:
        y = np.array([r[key] for r in records])
        if not np.any(y):
            continue
        ax.plot(steps[k - 1:], np.convolve(y, kernel, mode="valid"), label=key[5:], lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8, frameon=False)
    evals = [(r["step"], r["top1_eval"]) for r in records if "top1_eval" in r]
    if evals:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evals), "k.--", lw=0.8, label="top-1")
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("held-out top-1")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def heatmap_grid(images: np.ndarray, maps: np.ndarray, peaks, path) -> None:
    """One row per image: the input, then each branch heatmap with its peak marked."""
    n, P = maps.shape[:2]
    fig, axes = plt.subplots(n, P + 1, figsize=(1.6 * (P + 1), 1.6 * n), squeeze=False)
    for j in range(n):
        axes[j, 0].imshow(images[j, ..., 0], cmap="gray", vmin=0, vmax=1)
        for p in range(P):
            ax = axes[j, p + 1]
            ax.imshow(maps[j, p], cmap="inferno", vmin=0, vmax=1)
            r, c = peaks[j][p]
            ax.plot(c, r, "c+", ms=8, mew=2)
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0, 0].set_title("input", fontsize=8)
    for p in range(P):
        axes[0, p + 1].set_title(f"branch {p + 1}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
