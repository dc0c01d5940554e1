"""Loss-curve figures from a metrics log."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def read_metrics(path) -> dict[str, np.ndarray]:
    """Columns of a tab-separated metrics log, keyed by header name."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    rows = [line.split("\t") for line in lines[1:] if line]
    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return {name: table[:, i] for i, name in enumerate(header)}


def running_mean(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_losses(metrics: dict, path, window: int = 25) -> Path:
    """Reconstruction and regularization loss against step, plus pose and
    discriminator diagnostics when they carry information."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    step = metrics["step"]
    show_disc = np.isfinite(metrics["disc_acc"]).any()
    fig, axes = plt.subplots(1, 3 if show_disc else 2, figsize=(11 if show_disc else 8, 3.2))
    x = step[window - 1:] if len(step) >= window > 1 else step

    ax = axes[0]
    ax.plot(step, metrics["recon"], color="0.8", lw=0.8)
    ax.plot(x, running_mean(metrics["recon"], window), color="C0", label="reconstruction")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title("reconstruction loss")

    ax = axes[1]
    ax.plot(step, metrics["reg"], color="0.8", lw=0.8)
    ax.plot(x, running_mean(metrics["reg"], window), color="C1", label="regularization")
    if "z_mean_norm" in metrics:
        ax.plot(x, running_mean(metrics["z_mean_norm"], window), color="C2", label="|batch mean z|")
    ax.set_xlabel("step")
    ax.set_title("regularization")
    ax.legend(frameon=False, fontsize=8)

    if show_disc:
        ax = axes[2]
        ax.plot(x, running_mean(metrics["disc_acc"], window), color="C3")
        ax.axhspan(0.35, 0.65, color="C3", alpha=0.1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("step")
        ax.set_title("discriminator accuracy")

    for ax in axes:
        ax.spines["top"].set_visible(False)
        ax.spines["right"].set_visible(False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
