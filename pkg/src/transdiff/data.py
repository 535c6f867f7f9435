"""Synthetic class-conditional latent images standing in for VAE latents."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch

from .numeric import SeededRng, get_dtype

PATTERNS = (
    "bars-h", "bars-v", "bars-diag", "bars-anti",
    "checker-fine", "checker-coarse",
    "blobs-main", "blobs-anti",
)

HELDOUT_OFFSET = 1 << 24


@dataclass
class SyntheticDatasetSpec:
    n_classes: int = 8
    h: int = 8
    w: int = 8
    d: int = 4
    noise_std: float = 0.25
    amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_classes <= len(PATTERNS):
            raise ValueError(f"n_classes must lie in [1, {len(PATTERNS)}]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _spatial_pattern(name: str, h: int, w: int) -> np.ndarray:
    """One period of the pattern across the grid, values in [-1, 1]."""
    i, j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    y, x = i / h, j / w
    if name == "bars-h":
        return np.cos(2 * np.pi * y)
    if name == "bars-v":
        return np.cos(2 * np.pi * x)
    if name == "bars-diag":
        return np.cos(2 * np.pi * (x + y))
    if name == "bars-anti":
        return np.cos(2 * np.pi * (x - y))
    if name == "checker-fine":
        return np.where((i + j) % 2 == 0, 1.0, -1.0)
    if name == "checker-coarse":
        return np.where((i < h / 2) ^ (j < w / 2), -1.0, 1.0)
    yc, xc = y + 0.5 / h, x + 0.5 / w

    def blob(cy, cx, s=0.2):
        return np.exp(-((yc - cy) ** 2 + (xc - cx) ** 2) / (2 * s * s))

    if name == "blobs-main":
        return 2 * (blob(0.25, 0.25) + blob(0.75, 0.75)) - 1
    if name == "blobs-anti":
        return 2 * (blob(0.25, 0.75) + blob(0.75, 0.25)) - 1
    raise ValueError(f"unknown pattern {name!r}")


def _channel_signature(class_id: int, d: int) -> np.ndarray:
    k = np.arange(d)
    sig = np.cos(np.pi * (k + 0.5) * (class_id % 2 + 1) / d + 0.3 * class_id)
    return sig / np.linalg.norm(sig) * math.sqrt(d)


def class_mean(spec: SyntheticDatasetSpec, class_id: int) -> np.ndarray:
    """Noise-free latent of a class, shape (h*w, d)."""
    if not 0 <= class_id < spec.n_classes:
        raise ValueError(f"class_id {class_id} out of range [0, {spec.n_classes})")
    pat = _spatial_pattern(PATTERNS[class_id], spec.h, spec.w).reshape(-1, 1)
    return spec.amplitude * pat * _channel_signature(class_id, spec.d)[None, :]


def verify_separation(spec: SyntheticDatasetSpec, factor: float = 4.0) -> float:
    """Smallest pairwise distance between class means; raises if below factor * noise_std."""
    means = [class_mean(spec, c).reshape(-1) for c in range(spec.n_classes)]
    dmin = math.inf
    for i in range(len(means)):
        for j in range(i + 1, len(means)):
            dmin = min(dmin, float(np.linalg.norm(means[i] - means[j])))
    if dmin < factor * spec.noise_std:
        raise ValueError(f"class means only {dmin:.3g} apart (< {factor} x noise_std)")
    return dmin


def gen_synthetic(spec: SyntheticDatasetSpec, class_id: int, count: int, start: int = 0) -> torch.Tensor:
    """``count`` latents of one class, (count, h*w, d); sample i depends only on (seed, class_id, start + i)."""
    mean = class_mean(spec, class_id)
    out = np.empty((count, *mean.shape))
    for i in range(count):
        rng = SeededRng(spec.seed, (class_id << 32) | (start + i))
        out[i] = mean + spec.noise_std * rng.normal(mean.shape)
    return torch.from_numpy(out).to(get_dtype())


def gen_heldout(spec: SyntheticDatasetSpec, class_id: int, count: int) -> torch.Tensor:
    """Held-out latents drawn from an index range disjoint from the training pool."""
    return gen_synthetic(spec, class_id, count, start=HELDOUT_OFFSET)
