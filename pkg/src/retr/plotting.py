"""Report figures written to files (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import smoothed  # noqa: E402


def plot_loss_curve(rows: Sequence[dict], path, window: int = 50) -> Path:
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("loss", "loss_color", "loss_depth"):
        vals = [r[key] for r in rows]
        line = ax.plot(steps, vals, alpha=0.25, lw=0.8)[0]
        ax.plot(steps, smoothed(vals, window), color=line.get_color(), lw=1.5, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_depth_maps(pred: Dict[int, np.ndarray], gt: Dict[int, np.ndarray], path, near: float, far: float) -> Path:
    views = sorted(pred)
    fig, axes = plt.subplots(3, len(views), figsize=(2.2 * len(views), 6.4), squeeze=False)
    for col, v in enumerate(views):
        valid = gt[v] > 0
        err = np.where(valid, np.abs(pred[v] - gt[v]), np.nan)
        axes[0, col].imshow(np.where(valid, gt[v], np.nan), vmin=near, vmax=far, cmap="viridis")
        axes[1, col].imshow(pred[v], vmin=near, vmax=far, cmap="viridis")
        axes[2, col].imshow(err, vmin=0, vmax=0.2 * (far - near), cmap="magma")
        axes[0, col].set_title(f"view {v}")
    for row, name in enumerate(("gt depth", "predicted", "|error|")):
        axes[row, 0].set_ylabel(name)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_attention(t: np.ndarray, alpha: np.ndarray, path, gt_depth: Optional[float] = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    order = np.argsort(t)
    ax.plot(t[order], alpha[order], marker=".", lw=1)
    if gt_depth is not None and gt_depth > 0:
        ax.axvline(gt_depth, color="k", ls="--", lw=1, label="surface")
        ax.legend(frameon=False)
    ax.set_xlabel("t")
    ax.set_ylabel("alpha")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
