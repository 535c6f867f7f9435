"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .export import tile  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def size(scale=1.0, ratio=None):
    width = 6.0 * scale
    ratio = ratio or (np.sqrt(5.0) - 1.0) / 2.0
    return (width, width * ratio)


def smooth(values: Sequence[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) == 0 or window <= 1:
        return v
    window = min(window, len(v))
    kernel = np.ones(window) / window
    head = np.cumsum(v[: window - 1]) / np.arange(1, window)
    return np.concatenate([head, np.convolve(v, kernel, mode="valid")])


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curve(rows: Sequence[Mapping], path, window: int = 50):
    """Raw and smoothed joint loss per step, one colour per phase."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size(0.9))
        for phase in dict.fromkeys(r["phase"] for r in rows):
            sub = [r for r in rows if r["phase"] == phase]
            steps = [r["step"] for r in sub]
            loss = [r["loss"] for r in sub]
            line, = ax.plot(steps, smooth(loss, window), label=phase)
            ax.plot(steps, loss, color=line.get_color(), alpha=0.2, lw=0.5)
        ax.set_xlabel("step")
        ax.set_ylabel("joint flow-matching loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_samples(latents, h: int, w: int, path, title: str | None = None):
    img = tile(latents, h, w)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size(0.9, ratio=max(0.15, h / img.shape[1] * 1.3)))
        ax.imshow(np.ma.masked_invalid(img), cmap="gray", interpolation="nearest")
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_eval(rows: Sequence[Mapping], path, baseline: Sequence[Mapping] | None = None):
    """Per-class sliced-Wasserstein bars (optionally against a baseline) and centroid accuracy."""
    classes = [r["class"] for r in rows]
    x = np.arange(len(classes))
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=size(1.2, ratio=0.4))
        width = 0.4 if baseline else 0.8
        ax1.bar(x - (width / 2 if baseline else 0), [r["sliced_wasserstein"] for r in rows], width, label="model")
        if baseline:
            ax1.bar(x + width / 2, [r["sliced_wasserstein"] for r in baseline], width, label="baseline")
            ax1.legend(frameon=False)
        ax1.set_xticks(x, classes)
        ax1.set_xlabel("class")
        ax1.set_ylabel("sliced Wasserstein")
        ax2.bar(x, [r["centroid_accuracy"] for r in rows], 0.8, color="C2")
        ax2.set_ylim(0, 1.05)
        ax2.set_xticks(x, classes)
        ax2.set_xlabel("class")
        ax2.set_ylabel("centroid accuracy")
        return _save(fig, path)


def plot_diversity(rows: Sequence[Mapping], path):
    """Grouped bars of the diversity metric per class and paradigm (lower = more diverse)."""
    classes = sorted({r["class"] for r in rows})
    paradigms = list(dict.fromkeys(r["paradigm"] for r in rows))
    x = np.arange(len(classes))
    width = 0.8 / len(paradigms)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size(0.9))
        for i, p in enumerate(paradigms):
            vals = {r["class"]: r["diversity"] for r in rows if r["paradigm"] == p}
            ax.bar(x + (i - (len(paradigms) - 1) / 2) * width, [vals.get(c, np.nan) for c in classes], width, label=p)
        ax.set_xticks(x, classes)
        ax.set_xlabel("class")
        ax.set_ylabel("mean |cosine| between condition tokens")
        ax.legend(frameon=False)
        return _save(fig, path)
