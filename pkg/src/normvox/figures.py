"""Matplotlib renderings of the per-frame statistics, written next to the CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .sampling import BinStatistics


def _bin_labels(stats: BinStatistics) -> list[str]:
    labels = [
        f"{i * stats.bin_width:g}-{(i + 1) * stats.bin_width:g}"
        for i in range(stats.num_bins)
    ]
    labels.append(f">{stats.num_bins * stats.bin_width:g}")
    return labels


def render_bin_counts(before: BinStatistics, after: BinStatistics,
                      path: str | Path) -> None:
    """Voxel count per radial bin (plus the far field), before vs after sampling."""
    x = np.arange(before.num_bins + 1)
    cb = np.r_[before.counts, before.far_count]
    ca = np.r_[after.counts, after.far_count]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(x - 0.2, cb, width=0.4, label="before", color="#888888")
    ax.bar(x + 0.2, ca, width=0.4, label="after", color="#2a7fbf")
    ax.set_xticks(x, _bin_labels(before), rotation=45, ha="right", fontsize=8)
    ax.set_xlabel("distance from sensor (m)")
    ax.set_ylabel("voxels")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_bin_density(before: BinStatistics, after: BinStatistics,
                       path: str | Path) -> None:
    """Areal voxel density per radial bin, before vs after sampling."""
    x = np.arange(before.num_bins)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(x - 0.2, before.densities, width=0.4, label="before", color="#888888")
    ax.bar(x + 0.2, after.densities, width=0.4, label="after", color="#2a7fbf")
    labels = _bin_labels(before)[:-1]
    ax.set_xticks(x, labels, rotation=45, ha="right", fontsize=8)
    ax.set_xlabel("distance from sensor (m)")
    ax.set_ylabel("voxels / m$^2$")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_density_hist(counts: np.ndarray, edges: np.ndarray,
                        path: str | Path) -> None:
    """Histogram of normalized normal-vector densities."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
           color="#2a7fbf", edgecolor="white", linewidth=0.4)
    ax.set_xlabel("normal-vector density")
    ax.set_ylabel("voxels")
    ax.set_xlim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
