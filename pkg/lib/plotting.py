"""
Optional SVG rendering of exported plot data (needs the ``plots`` extra).
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from lib.datasets import Dataset
from lib.evaluation import DecisionGrid

logger = logging.getLogger(__name__)

CLASS_COLORS = ("tab:blue", "tab:red", "tab:green", "tab:orange")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["savefig.bbox"] = "tight"
    return plt


def render_decision_boundary(grid: DecisionGrid, ds: Dataset, path: Path) -> Path:
    """Dataset scatter (labeled points ringed) over the p_class0 = 0.5 contour."""
    plt = _pyplot()
    res = grid.resolution
    p0 = grid.proba[:, 0].reshape(res, res)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.contourf(grid.xs, grid.ys, p0, levels=20, cmap="RdBu", alpha=0.3)
    ax.contour(grid.xs, grid.ys, p0, levels=[0.5], colors="k", linewidths=1.0)
    for c in range(ds.n_classes):
        members = ds.y == c
        ax.scatter(ds.X[members, 0], ds.X[members, 1], s=4, color=CLASS_COLORS[c % len(CLASS_COLORS)])
    labeled = ds.X[ds.labeled_idx]
    ax.scatter(labeled[:, 0], labeled[:, 1], s=60, facecolors="none", edgecolors="k", linewidths=1.2)
    ax.set_xlabel("$x_0$")
    ax.set_ylabel("$x_1$")
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.debug(f"[export] wrote {path}")
    return path


def render_similarity_heatmap(S: np.ndarray, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    image = ax.imshow(S, vmin=0.0, vmax=1.0, cmap="viridis", interpolation="nearest")
    fig.colorbar(image, ax=ax)
    ax.set_title(f"learned similarity ({S.shape[0]} samples)")
    ax.set_xticks([])
    ax.set_yticks([])
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.debug(f"[export] wrote {path}")
    return path
