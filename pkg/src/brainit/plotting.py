"""Figures written next to the CLI's JSON/CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9.0,
    "axes.linewidth": 0.8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.direction": "out",
    "ytick.direction": "out",
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "svg.hashsalt": "brainit",
    "path.simplify": False,
}
# fixed metadata keeps repeated renders byte-identical
PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
    return path


def metric_bars(rows: dict, path, title: str = ""):
    """Grouped bars: one group per metric, one bar per row (setting)."""
    names = list(rows)
    metrics = list(next(iter(rows.values())))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(metrics) + 1), 3.0))
        width = 0.8 / max(1, len(names))
        x = np.arange(len(metrics))
        for i, name in enumerate(names):
            ax.bar(x + i * width - 0.4 + width / 2, [rows[name][m] for m in metrics], width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(metrics, rotation=30, ha="right")
        ax.axhline(0, color="k", lw=0.5)
        ax.set_title(title)
        ax.legend(fontsize=7)
        return _save(fig, path)


def recon_grid(rows: dict, path, n: int = 8):
    """Image grid, one row per named stack of (N, H, W, 3) images."""
    names = list(rows)
    n = min(n, min(len(v) for v in rows.values()))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(names), n, figsize=(1.1 * n, 1.2 * len(names)), squeeze=False)
        for r, name in enumerate(names):
            for c in range(n):
                ax = axes[r, c]
                ax.imshow(np.clip(rows[name][c], 0, 1), interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
            axes[r, 0].set_ylabel(name, fontsize=7)
        return _save(fig, path)


def loss_curve(steps, losses, path, ylabel: str = "feature loss"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.plot(steps, losses, lw=1.0)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        return _save(fig, path)
