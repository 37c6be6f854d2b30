"""Figures written next to the CSV outputs.

Density heatmaps and image grids go to PPM/PGM with no plotting library.
Scatter plots, loss curves and sweep charts use matplotlib (Agg backend, PNG).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageio import write_pgm, write_ppm

__all__ = [
    "density_heatmap",
    "write_density_ppm",
    "image_grid",
    "write_image_grid",
    "plot_scatter",
    "plot_loss",
    "plot_sweep",
]

# dark blue -> teal -> yellow, interpolated linearly
_STOPS = np.array([[0.05, 0.03, 0.20], [0.13, 0.45, 0.55], [0.99, 0.91, 0.15]])


def density_heatmap(points, bins: int = 128, extent: float = 3.0) -> np.ndarray:
    """2-D histogram on [-extent, extent]^2, rows ordered top (large y) to bottom, scaled to [0, 1]."""
    pts = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    hist, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=bins, range=[[-extent, extent], [-extent, extent]])
    img = np.log1p(hist.T[::-1])
    top = img.max()
    return img / top if top > 0 else img


def _colorize(img: np.ndarray) -> np.ndarray:
    pos = np.clip(img, 0.0, 1.0) * (len(_STOPS) - 1)
    lo = np.minimum(pos.astype(int), len(_STOPS) - 2)
    frac = (pos - lo)[..., None]
    return _STOPS[lo] * (1 - frac) + _STOPS[lo + 1] * frac


def write_density_ppm(path, points, bins: int = 128, extent: float = 3.0) -> None:
    write_ppm(path, _colorize(density_heatmap(points, bins, extent)))


def image_grid(images, cols: int = 8, pad: int = 1) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    n, h, w = imgs.shape
    cols = min(cols, n)
    rows = -(-n // cols)
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad))
    for k in range(n):
        r, c = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y : y + h, x : x + w] = imgs[k]
    return grid


def write_image_grid(path, images, cols: int = 8) -> None:
    write_pgm(path, image_grid(images, cols))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"font.size": 9, "axes.titlesize": 10, "figure.dpi": 100, "savefig.dpi": 120})
    return plt


def plot_scatter(path, sets: dict, extent: float = 3.0, title: str = "") -> None:
    """One scatter panel per labelled 2-D sample set."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(sets), figsize=(3.2 * len(sets), 3.2), squeeze=False)
    for ax, (label, pts) in zip(axes[0], sets.items()):
        pts = np.asarray(pts)
        ax.scatter(pts[:, 0], pts[:, 1], s=2, alpha=0.5, lw=0)
        ax.set_xlim(-extent, extent)
        ax.set_ylim(-extent, extent)
        ax.set_aspect("equal")
        ax.set_title(label)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)


def plot_loss(path, losses, smooth: int = 100) -> None:
    plt = _pyplot()
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(losses, lw=0.5, alpha=0.4, label="batch")
    if len(losses) >= smooth > 1:
        ma = np.convolve(losses, np.ones(smooth) / smooth, mode="valid")
        ax.plot(np.arange(smooth - 1, len(losses)), ma, lw=1.2, label=f"mean of {smooth}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)


def plot_sweep(path, series: dict, xlabel: str = "r", ylabel: str = "value") -> None:
    """Line chart; ``series`` maps a label to (x values, y values)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", ms=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
