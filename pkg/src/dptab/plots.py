"""Matplotlib figures for grid results, rendered headless to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .report import pivot  # noqa: E402


def _label(e):
    return "none" if e is None else f"{e:g}"


def plot_heatmap(records, method, path) -> Path:
    rows, cols, cells = pivot(records, method)
    grid = np.full((len(rows), len(cols)), np.nan)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            if (r, c) in cells:
                grid[i, j] = cells[(r, c)][0]
    fig, ax = plt.subplots(figsize=(1.1 * len(cols) + 2.5, 0.7 * len(rows) + 2))
    im = ax.imshow(grid, cmap="viridis", aspect="auto", origin="lower")
    ax.set_xticks(range(len(cols)), [_label(c) for c in cols])
    ax.set_yticks(range(len(rows)), [_label(r) for r in rows])
    ax.set_xlabel("fine-tuning epsilon")
    ax.set_ylabel("pretraining epsilon")
    ax.set_title(f"{method}: mean test accuracy")
    for i in range(len(rows)):
        for j in range(len(cols)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.3f}", ha="center", va="center",
                        color="w", fontsize=8)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_accuracy_vs_eps_f(records, eps_p, path) -> Path:
    """Accuracy against fine-tuning budget for every method at one pretraining budget."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted({r.method for r in records}):
        rows, cols, cells = pivot(records, method)
        key_p = None if method == "scratch" else eps_p
        pts = [(c, cells[(key_p, c)]) for c in cols if c is not None and (key_p, c) in cells]
        if pts:
            x = [p[0] for p in pts]
            m = np.array([p[1][0] for p in pts])
            s = np.array([p[1][1] for p in pts])
            ax.errorbar(x, m, yerr=s, marker="o", capsize=3, label=method)
        elif (key_p, None) in cells:  # zero-shot: a flat reference line
            ax.axhline(cells[(key_p, None)][0], ls="--", color="grey", label=method)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("fine-tuning epsilon")
    ax.set_ylabel("test accuracy")
    ax.set_title(f"pretraining epsilon = {_label(eps_p)}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_all(records, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = list(records)
    paths = []
    for method in sorted({r.method for r in records}):
        rows, cols, _ = pivot(records, method)
        if len(rows) * len(cols) > 1:
            paths.append(plot_heatmap(records, method, out / f"heatmap_{method}.png"))
    for eps_p in sorted({r.eps_p for r in records if r.eps_p is not None}):
        paths.append(plot_accuracy_vs_eps_f(records, eps_p, out / f"accuracy_eps_p{eps_p:g}.png"))
    return paths
