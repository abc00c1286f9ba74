"""Figures rendered from the plot-ready CSV files the CLI writes."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METHOD_COLOURS = {"npe": "tab:orange", "exchange": "tab:green"}


def _read(path):
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    return np.atleast_1d(data)


def _theta_columns(names):
    return [c for c in names if c.startswith("theta_")]


def plot_comparison(paired_csv, out_png, labels=None, truth=None):
    """Posterior-mean densities per coordinate (diagonal) and pairwise scatter (off-diagonal)."""
    data = _read(paired_csv)
    cols = _theta_columns(data.dtype.names)
    p = len(cols)
    labels = labels or cols
    fig, axes = plt.subplots(p, p, figsize=(3 * p, 3 * p), squeeze=False)
    for method in np.unique(data["method"]):
        rows = data[data["method"] == method]
        colour = METHOD_COLOURS.get(method)
        for i in range(p):
            for j in range(p):
                ax = axes[i, j]
                if i == j:
                    ax.hist(rows[cols[i]], bins=20, density=True, histtype="step", color=colour, label=method)
                elif i > j:
                    ax.scatter(rows[cols[j]], rows[cols[i]], s=6, alpha=0.5, color=colour)
                else:
                    ax.axis("off")
    for i in range(p):
        axes[p - 1, i].set_xlabel(labels[i])
        if i:
            axes[i, 0].set_ylabel(labels[i])
        if truth is not None:
            axes[i, i].axvline(truth[i], color="purple", ls="--")
            for j in range(i):
                axes[i, j].scatter([truth[j]], [truth[i]], color="purple", marker="x")
    axes[0, 0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def plot_rounds(rounds_csv, out_png, labels=None, truth=None):
    """Posterior draws per SNPE round, later rounds drawn darker."""
    data = _read(rounds_csv)
    cols = _theta_columns(data.dtype.names)
    labels = labels or cols
    rounds = np.unique(data["round"])
    fig, axes = plt.subplots(1, len(cols), figsize=(4 * len(cols), 3.2), squeeze=False)
    for r_i, r in enumerate(rounds):
        rows = data[data["round"] == r]
        shade = 0.25 + 0.75 * (r_i + 1) / len(rounds)
        for c, ax in zip(cols, axes[0]):
            ax.hist(rows[c], bins=50, density=True, histtype="step", color=plt.cm.Blues(shade),
                    label=f"round {r}")
    for k, ax in enumerate(axes[0]):
        ax.set_xlabel(labels[k])
        if truth is not None:
            ax.axvline(truth[k], color="black", ls="--")
    axes[0, 0].legend(fontsize="x-small")
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def plot_bias_cases(bias_csv, out_png, labels=None):
    """Case estimates against the true parameters, one panel per coordinate."""
    data = _read(bias_csv)
    truths = [c for c in data.dtype.names if c.startswith("true_")]
    labels = labels or truths
    fig, axes = plt.subplots(1, len(truths), figsize=(4 * len(truths), 3.5), squeeze=False)
    for k, ax in enumerate(axes[0]):
        t, e = data[f"true_{k + 1}"], data[f"est_{k + 1}"]
        ax.scatter(t, e, s=14)
        lim = [min(t.min(), e.min()), max(t.max(), e.max())]
        ax.plot(lim, lim, color="grey", lw=0.8)
        ax.set_xlabel(f"true {labels[k]}")
        ax.set_ylabel("estimate")
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)


def render_directory(directory, labels=None) -> list[Path]:
    """Render every recognised plot CSV in ``directory`` to a PNG beside it."""
    directory = Path(directory)
    made = []
    for csv_path in sorted(directory.glob("*paired*.csv")):
        made.append(plot_comparison(csv_path, csv_path.with_suffix(".png"), labels))
    for csv_path in sorted(directory.glob("*rounds*.csv")):
        made.append(plot_rounds(csv_path, csv_path.with_suffix(".png"), labels))
    for csv_path in sorted(directory.glob("bias_cases*.csv")):
        made.append(plot_bias_cases(csv_path, csv_path.with_suffix(".png"), labels))
    return made
