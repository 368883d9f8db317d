"""Matplotlib figures for evaluation reports and training curves (written to files, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (6.75, 2.8)
COLORS = ["#1f4e79", "#c55a11", "#548235", "#7f6000", "#7030a0"]


def set_plot_style(fontsize: int = 9) -> None:
    plt.rcParams.update({
        "font.size": fontsize,
        "axes.labelsize": fontsize,
        "axes.titlesize": fontsize,
        "legend.fontsize": fontsize - 1,
        "xtick.labelsize": fontsize - 1,
        "ytick.labelsize": fontsize - 1,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 150,
    })


def report_figure(rows: Sequence[tuple[str, object]], path: Path | str) -> Path:
    """Grouped bars of per-class IoU and Dice, one group per class, one bar per method."""
    set_plot_style()
    rows = list(rows)
    names = list(rows[0][1].class_names) + ["mean"]
    fig, axes = plt.subplots(1, 2, figsize=FIGSIZE, sharey=True)
    width = 0.8 / len(rows)
    x = np.arange(len(names))
    for ax, key, mean, title in ((axes[0], "iou", "miou", "IoU"), (axes[1], "dice", "mdice", "Dice")):
        for i, (label, rep) in enumerate(rows):
            vals = [getattr(rep, key)[n] for n in names[:-1]] + [getattr(rep, mean)]
            vals = [np.nan if v is None else 100 * v for v in vals]
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width, label=label,
                   color=COLORS[i % len(COLORS)])
        ax.set_xticks(x)
        ax.set_xticklabels(names)
        ax.set_title(title)
        ax.set_ylim(0, 100)
    axes[0].set_ylabel("score (%)")
    axes[1].legend(loc="upper left", frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_figure(history: Iterable[dict], path: Path | str) -> Path:
    """Per-step loss components of one training run."""
    set_plot_style()
    history = list(history)
    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(figsize=(FIGSIZE[0] / 2, FIGSIZE[1]))
    for i, key in enumerate(("total", "cls", "struct", "sim")):
        ax.plot(steps, [h[key] for h in history], label=key, color=COLORS[i], marker="o", ms=2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
