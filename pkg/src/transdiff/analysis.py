"""Condition-feature diversity, condition fusion, and desk-scale fidelity metrics."""
from __future__ import annotations

import csv
import io
from typing import Mapping, Sequence

import numpy as np
import torch

from .numeric import SeededRng


def diversity_metric(features) -> float:
    """Mean absolute off-diagonal cosine similarity of the feature rows.

    Rows are L2-normalised first. The result lies in [0, 1]; lower means the
    rows point in more varied directions.
    """
    a = torch.as_tensor(features, dtype=torch.float64)
    if a.dim() != 2 or a.shape[0] < 2:
        raise ValueError("need a 2-D matrix with at least two rows")
    norms = a.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm feature row")
    a = a / norms
    s = (a @ a.T).abs()
    n = a.shape[0]
    off = s.sum() - s.diagonal().sum()
    return float(off / (n * (n - 1)))


def fuse_conditions(c_a: torch.Tensor, c_b: torch.Tensor, k: int, mode: str = "prefix") -> torch.Tensor:
    """Take k token rows from ``c_a`` and the remaining rows from ``c_b``.

    ``mode="prefix"`` takes the first k rows of ``c_a``; ``"interleave"`` spreads
    the k rows from ``c_a`` evenly over the token positions.
    """
    if c_a.shape != c_b.shape:
        raise ValueError("condition blocks must have equal shapes")
    n = c_a.shape[-2]
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}]")
    if mode == "prefix":
        take_a = torch.arange(n) < k
    elif mode == "interleave":
        take_a = torch.zeros(n, dtype=torch.bool)
        if k:
            take_a[torch.linspace(0, n - 1, k).round().long()] = True
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return torch.where(take_a[:, None], c_a, c_b)


def sliced_wasserstein(X, Y, n_proj: int = 128, rng: SeededRng | None = None) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit projections.

    Unequal sample counts are handled through quantile functions on a common grid.
    """
    x = np.asarray(X, dtype=np.float64)
    y = np.asarray(Y, dtype=np.float64)
    x = x.reshape(len(x), -1) if x.ndim != 1 else x[:, None]
    y = y.reshape(len(y), -1) if y.ndim != 1 else y[:, None]
    if len(x) == 0 or len(y) == 0:
        raise ValueError("sample sets must be non-empty")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    rng = rng or SeededRng(0, 0)
    dirs = rng.normal((n_proj, x.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px = np.sort(x @ dirs.T, axis=0)
    py = np.sort(y @ dirs.T, axis=0)
    if len(px) == len(py):
        return float(np.abs(px - py).mean())
    # W1 = integral over q of |F^-1(q) - G^-1(q)|, piecewise constant on merged breakpoints
    qs = np.union1d(np.arange(1, len(px) + 1) / len(px), np.arange(1, len(py) + 1) / len(py))
    widths = np.diff(np.concatenate([[0.0], qs]))
    ix = np.minimum(np.ceil(qs * len(px) - 1e-12).astype(int) - 1, len(px) - 1)
    iy = np.minimum(np.ceil(qs * len(py) - 1e-12).astype(int) - 1, len(py) - 1)
    return float((np.abs(px[ix] - py[iy]) * widths[:, None]).sum(axis=0).mean())


def class_centroids(latents_by_class: Mapping[int, torch.Tensor]) -> dict[int, np.ndarray]:
    return {c: np.asarray(v, dtype=np.float64).reshape(len(v), -1).mean(axis=0)
            for c, v in latents_by_class.items()}


def centroid_accuracy(samples, labels: Sequence[int], centroids: Mapping[int, np.ndarray]) -> float:
    """Fraction of samples whose nearest centroid (Euclidean) carries their label."""
    s = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    if len(s) == 0:
        raise ValueError("no samples")
    if len(labels) != len(s):
        raise ValueError("one label per sample required")
    missing = set(labels.tolist()) - set(centroids)
    if missing:
        raise ValueError(f"no centroid for labels {sorted(missing)}")
    keys = sorted(centroids)
    cents = np.stack([np.asarray(centroids[k], dtype=np.float64).reshape(-1) for k in keys])
    s = s.reshape(len(s), -1)
    d2 = ((s[:, None, :] - cents[None, :, :]) ** 2).sum(-1)
    nearest = np.asarray(keys)[d2.argmin(axis=1)]
    return float((nearest == labels).mean())


def format_metrics(metrics: Mapping[str, float]) -> str:
    """Plain-text ``key=value`` lines."""
    return "".join(f"{k}={v:.6g}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in metrics.items())


def metrics_csv(rows: Sequence[Mapping[str, object]]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
