"""Figure rendering for the ``report`` command.

Only this module imports matplotlib, and only on first use, so the rest of
the package runs without it.
"""
from __future__ import annotations

import math

import numpy as np

from .spectra import HISTORY_FLAGS

CLASS_NAMES = ("AMI", "CAD", "AF", "CON")

RC = {
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "font.size": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.5,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update(RC)
    return plt


def size(scale=1.0, width_in=5.5):
    golden = (math.sqrt(5.0) - 1.0) / 2.0
    return [width_in * scale, width_in * scale * golden]


def _save(fig, path):
    fig.savefig(path)
    _plt().close(fig)
    return path


def _annotated_heatmap(ax, values, rows, cols, fmt, cmap):
    im = ax.imshow(values, cmap=cmap, aspect="auto")
    ax.set_xticks(range(len(cols)), cols)
    ax.set_yticks(range(len(rows)), rows)
    hi = np.nanmax(np.abs(values)) or 1.0
    for (i, j), v in np.ndenumerate(values):
        ax.text(j, i, format(v, fmt), ha="center", va="center",
                color="white" if abs(v) > 0.6 * hi else "black", fontsize=8)
    return im


def plot_loss(log_rows, path):
    """Epoch loss (left axis) and training accuracy (right axis)."""
    plt = _plt()
    epochs = [int(r["epoch"]) for r in log_rows]
    fig, ax = plt.subplots(figsize=size(0.9))
    ax.plot(epochs, [float(r["loss"]) for r in log_rows], color="C0", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    twin = ax.twinx()
    twin.plot(epochs, [float(r["train_acc"]) for r in log_rows], color="C1", ls="--", label="train acc")
    twin.set_ylabel("training accuracy")
    twin.set_ylim(0, 1.02)
    fig.legend(loc="upper right", bbox_to_anchor=(0.88, 0.88))
    return _save(fig, path)


def plot_confusion(cm, path):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = _annotated_heatmap(ax, np.asarray(cm), CLASS_NAMES, CLASS_NAMES, "d", "Blues")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, shrink=0.8)
    return _save(fig, path)


def plot_weight_matrix(weight, prob_entries, path):
    """Side-by-side heatmaps of the learned weights and the probability matrix."""
    plt = _plt()
    fig, (a, b) = plt.subplots(1, 2, figsize=size(1.2))
    _annotated_heatmap(a, np.asarray(weight), ("e_R",) + HISTORY_FLAGS, CLASS_NAMES, ".2f", "viridis")
    a.set_title("weight matrix")
    _annotated_heatmap(b, np.asarray(prob_entries), HISTORY_FLAGS, CLASS_NAMES, ".2f", "magma")
    b.set_title("P(class | history)")
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows, path, metric="accuracy"):
    """Grouped bars of ``metric`` per scale set, one bar per weight/fusion mode."""
    plt = _plt()
    scale_sets = list(dict.fromkeys(r["scales"] for r in rows))
    modes = list(dict.fromkeys(f"{r['weights']}/{r['fusion']}" for r in rows))
    lookup = {(r["scales"], f"{r['weights']}/{r['fusion']}"): float(r[metric]) for r in rows}
    width = 0.8 / max(len(modes), 1)
    fig, ax = plt.subplots(figsize=size(1.0))
    x = np.arange(len(scale_sets))
    for k, mode in enumerate(modes):
        vals = [lookup.get((s, mode), np.nan) for s in scale_sets]
        ax.bar(x + (k - (len(modes) - 1) / 2) * width, vals, width, label=mode)
    ax.set_xticks(x, scale_sets)
    ax.set_xlabel("scales")
    ax.set_ylabel(metric)
    lo = np.nanmin(list(lookup.values())) if lookup else 0.0
    ax.set_ylim(max(0.0, lo - 0.1), 1.0)
    ax.legend(ncol=2)
    return _save(fig, path)


def plot_gaf(pixels, path, title=None):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(3.2, 3.0))
    im = ax.imshow(pixels, cmap="rainbow", vmin=-1, vmax=1, origin="lower")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    return _save(fig, path)
