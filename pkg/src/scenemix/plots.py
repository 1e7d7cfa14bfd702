"""Matplotlib figure rendering for the report paths (stats, eval)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_series_figure(path, steps, series: dict, ylabel: str, title: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, values in series.items():
        ax.plot(steps, values, label=name, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_erase_fraction_figure(path, steps, fractions) -> None:
    save_series_figure(
        path,
        steps,
        {"erase fraction": fractions},
        ylabel="fraction of points erased",
        title="Erased-point fraction over training",
    )


def save_iou_figure(path, class_names, ious, miou: float) -> None:
    ious = np.asarray(ious, dtype=float)
    shown = [(n, v) for n, v in zip(class_names, ious) if not np.isnan(v)]
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [n for n, _ in shown]
    vals = [v for _, v in shown]
    ax.bar(range(len(vals)), vals, color="#4878cf")
    ax.axhline(miou, color="#d65f5f", linestyle="--", linewidth=1, label=f"mIoU = {miou:.3f}")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
