"""SVG figures drawn from the CSV files the analysis commands write.

Every function here reads numbers back from a CSV, never from a model, so a
plot and its table cannot disagree.
"""

from __future__ import annotations

import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_trajectory", "plot_histograms", "plot_translation", "plot_heatmap", "plot_curve"]

START_COLOR = "tab:blue"
END_COLOR = "tab:red"


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_trajectory(csv_path, svg_path, title: str | None = None) -> None:
    """Cumulative position per step; blue marks the start, red the end."""
    rows = _rows(csv_path)
    x = np.array([float(r["x_px"]) for r in rows])
    y = np.array([float(r["y_px"]) for r in rows])
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    ax.plot(x, y, color="0.4", lw=1.2, marker=".", gid="path")
    ax.plot(x[:1], y[:1], "o", color=START_COLOR, ms=8, gid="start-marker")
    ax.plot(x[-1:], y[-1:], "o", color=END_COLOR, ms=8, gid="end-marker")
    span = max(np.abs(np.concatenate([x, y])).max(), 0.5) * 1.15
    ax.set_xlim(-span, span)
    ax.set_ylim(span, -span)  # screen orientation: y grows downward
    ax.set_aspect("equal")
    ax.axhline(0, color="0.85", lw=0.6)
    ax.axvline(0, color="0.85", lw=0.6)
    ax.set_xlabel("x (px)")
    ax.set_ylabel("y (px)")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)


def plot_histograms(csv_path, svg_path, xlabel: str) -> None:
    """Overlaid 1D histograms, one column per model, on the CSV's bin edges."""
    rows = _rows(csv_path)
    lo = np.array([float(r["bin_lo"]) for r in rows])
    hi = np.array([float(r["bin_hi"]) for r in rows])
    models = [k for k in rows[0] if k not in ("bin_lo", "bin_hi")]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for m in models:
        counts = np.array([float(r[m]) for r in rows])
        ax.stairs(counts, np.append(lo, hi[-1]), label=m, gid=f"hist-{m}")
    ax.set_xlim(lo[0], hi[-1])
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)


def plot_translation(csv_path, svg_path) -> None:
    """Joint (t_x, t_y) counts, one panel per model, identical square axes."""
    rows = _rows(csv_path)
    grids = defaultdict(dict)
    edges = {}
    for r in rows:
        ix, iy = int(r["ix"]), int(r["iy"])
        grids[r["model"]][ix, iy] = float(r["count"])
        edges.setdefault(("x", ix), (float(r["x_lo"]), float(r["x_hi"])))
        edges.setdefault(("y", iy), (float(r["y_lo"]), float(r["y_hi"])))
    n = max(k[1] for k in edges) + 1
    ex = np.array([edges["x", i][0] for i in range(n)] + [edges["x", n - 1][1]])
    ey = np.array([edges["y", i][0] for i in range(n)] + [edges["y", n - 1][1]])
    models = list(grids)
    fig, axes = plt.subplots(1, len(models), figsize=(3.2 * len(models), 3.2), squeeze=False)
    for ax, m in zip(axes[0], models):
        img = np.zeros((n, n))
        for (ix, iy), c in grids[m].items():
            img[ix, iy] = c
        ax.pcolormesh(ex, ey, img.T, cmap="magma", gid=f"joint-{m}")
        ax.set_xlim(ex[0], ex[-1])
        ax.set_ylim(ey[0], ey[-1])
        ax.set_aspect("equal")
        ax.set_title(m, fontsize=9)
        ax.set_xlabel("t_x")
        ax.set_ylabel("t_y")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)


def plot_heatmap(csv_path, svg_path, title: str | None = None, diverging: bool = True) -> None:
    """A matrix CSV (no header) as an image; rows are x, columns y."""
    data = np.loadtxt(csv_path, delimiter=",", ndmin=2)
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    if diverging:
        lim = float(np.abs(data).max()) or 1.0
        ax.imshow(data.T, cmap="RdBu_r", vmin=-lim, vmax=lim, gid="heatmap")
    else:
        ax.imshow(data.T, cmap="gray", gid="heatmap")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)


def plot_curve(csv_path, svg_path, x: str, y: str) -> None:
    rows = _rows(csv_path)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot([float(r[x]) for r in rows], [float(r[y]) for r in rows], lw=1, gid="curve")
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
