"""Reconstruction figures: ground truth vs recovered windows, as SVG files.

Colors follow the house convention: blue/green for true observation and
target, orange/red for their reconstructions, with optional shaded bands
between paired quantile bounds. File names are deterministic.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .inversion import QuantileBounds

OBS_TRUE_COLOR = "tab:blue"
TAR_TRUE_COLOR = "tab:green"
OBS_RECON_COLOR = "tab:orange"
TAR_RECON_COLOR = "tab:red"


def plot_reconstruction(
    recon_obs: np.ndarray,
    recon_tar: np.ndarray,
    true_obs: np.ndarray | None = None,
    true_tar: np.ndarray | None = None,
    bounds: QuantileBounds | None = None,
    out_dir: str | Path = ".",
    prefix: str = "sample",
    title: str | None = None,
) -> list[Path]:
    """One SVG per batch element; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    b, h, _ = recon_obs.shape
    f = recon_tar.shape[1]
    t_obs = np.arange(-h + 1, 1)
    t_tar = np.arange(1, f + 1)
    paths: list[Path] = []
    for i in range(b):
        fig, ax = plt.subplots(figsize=(7, 3))
        if bounds is not None:
            q = len(bounds.levels)
            for pair in range(q // 2):
                lo_level = bounds.levels[pair]
                hi_level = bounds.levels[q - 1 - pair]
                alpha = 0.12 + 0.08 * pair
                ax.fill_between(
                    t_obs,
                    bounds.obs_bounds[:, 0, pair],
                    bounds.obs_bounds[:, 0, q - 1 - pair],
                    color=OBS_RECON_COLOR,
                    alpha=alpha,
                    linewidth=0,
                    label=f"obs bounds {lo_level:g}-{hi_level:g}" if i == 0 else None,
                )
                ax.fill_between(
                    t_tar,
                    bounds.tar_bounds[:, 0, pair],
                    bounds.tar_bounds[:, 0, q - 1 - pair],
                    color=TAR_RECON_COLOR,
                    alpha=alpha,
                    linewidth=0,
                )
        if true_obs is not None:
            ax.plot(t_obs, true_obs[i, :, 0], color=OBS_TRUE_COLOR, label="observation")
        if true_tar is not None:
            ax.plot(t_tar, true_tar[i, :, 0], color=TAR_TRUE_COLOR, label="target")
        ax.plot(
            t_obs, recon_obs[i, :, 0], color=OBS_RECON_COLOR, linestyle="--",
            label="reconstructed observation",
        )
        ax.plot(
            t_tar, recon_tar[i, :, 0], color=TAR_RECON_COLOR, linestyle="--",
            label="reconstructed target",
        )
        ax.axvline(0.5, color="grey", linewidth=0.8, alpha=0.6)
        ax.set_xlabel("timestep (0 = last observation)")
        ax.set_ylabel("normalized value")
        if title:
            ax.set_title(f"{title} [{i}]" if b > 1 else title)
        ax.legend(loc="upper right", fontsize=7)
        fig.tight_layout()
        path = out / f"{prefix}_{i:03d}.svg"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_loss_trace(
    loss_trace: list[float],
    distance_trace: list[float],
    out_path: str | Path,
) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.semilogy(loss_trace, label="total loss")
    if distance_trace != loss_trace:
        ax.semilogy(distance_trace, label="gradient distance", linestyle="--")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
