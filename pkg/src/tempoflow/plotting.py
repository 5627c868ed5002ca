"""Figures written next to the CLI's text and JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

params = {
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "font.size": 9,
    "legend.fontsize": 9,
    "lines.linewidth": 1.5,
    "figure.dpi": 100,
}


def plot_objective(objective: Sequence[float], path, title: str = "consistency objective") -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(np.arange(len(objective)), objective, color="C0")
        ax.plot(np.arange(len(objective)), np.minimum.accumulate(objective), color="C1",
                linestyle="--", label="best so far")
        ax.set_xlabel("epoch")
        ax.set_ylabel("objective")
        ax.set_title(title)
        if len(objective) and min(objective) > 0:
            ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_per_frame(values: Sequence[float], path, ylabel: str, title: str = "") -> Path:
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.bar(np.arange(len(values)), values, color="C2")
        ax.set_xlabel("frame")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def contact_sheet(frames: Sequence[np.ndarray], path, title: str = "") -> Path:
    n = len(frames)
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, n, figsize=(1.4 * n, 1.6), squeeze=False)
        for i, (ax, f) in enumerate(zip(axes[0], frames)):
            ax.imshow(np.clip(np.asarray(f).transpose(1, 2, 0), 0, 1), interpolation="nearest")
            ax.set_title(str(i))
            ax.axis("off")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
