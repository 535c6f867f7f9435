"""Evaluation routines over a trained model: fidelity, diversity and fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .analysis import centroid_accuracy, class_centroids, diversity_metric, fuse_conditions, sliced_wasserstein
from .data import SyntheticDatasetSpec, gen_heldout, gen_synthetic
from .model import TransDiff, decode_from_condition, infer_1step, infer_mrar
from .numeric import SeededRng
from .sampler import SamplerConfig

EVAL_STREAM = 7 << 48
PROJ_STREAM = 8 << 48


def generate(model: TransDiff, class_id: int, n: int, cfg: SamplerConfig, seed: int,
             paradigm: str = "1step", n_refs: int = 0) -> torch.Tensor:
    rng = SeededRng(seed, EVAL_STREAM | class_id)
    if paradigm == "1step":
        return infer_1step(model, class_id, cfg, rng, n_samples=n)
    if paradigm == "mrar":
        return infer_mrar(model, class_id, n_refs, cfg, rng, n_samples=n)
    raise ValueError(f"unknown paradigm {paradigm!r}")


def real_centroids(spec: SyntheticDatasetSpec, per_class: int = 512) -> dict[int, np.ndarray]:
    return class_centroids({c: gen_synthetic(spec, c, per_class) for c in range(spec.n_classes)})


def evaluate(model: TransDiff, spec: SyntheticDatasetSpec, cfg: SamplerConfig, n_per_class: int = 512,
             seed: int = 0, paradigm: str = "1step", n_refs: int = 0, n_proj: int = 128) -> list[dict]:
    """Per-class sliced-Wasserstein distance to held-out data and centroid accuracy."""
    centroids = real_centroids(spec)
    rows = []
    for c in range(spec.n_classes):
        fake = generate(model, c, n_per_class, cfg, seed, paradigm, n_refs)
        real = gen_heldout(spec, c, n_per_class)
        sw = sliced_wasserstein(fake.reshape(n_per_class, -1), real.reshape(n_per_class, -1),
                                n_proj, SeededRng(seed, PROJ_STREAM | c))
        acc = centroid_accuracy(fake.reshape(n_per_class, -1), [c] * n_per_class, centroids)
        rows.append({"class": c, "sliced_wasserstein": sw, "centroid_accuracy": acc})
    return rows


def condition_diversity(model: TransDiff, class_id: int, paradigm: str = "1step", n_refs: int = 4,
                        n_samples: int = 16, cfg: SamplerConfig | None = None, seed: int = 0) -> float:
    """Diversity metric of the condition block used for the final image.

    For MRAR this is c_img_{n_refs}, averaged over ``n_samples`` generated
    reference chains; the 1-step condition is deterministic per class.
    """
    with torch.no_grad():
        if paradigm == "1step":
            (c,) = model.encode_conditions(model.assemble_1step(class_id))
            return diversity_metric(c[0])
        if paradigm != "mrar":
            raise ValueError(f"unknown paradigm {paradigm!r}")
        cfg = cfg or SamplerConfig(steps=20, mode="ode")
        _, conds = infer_mrar(model, class_id, n_refs, cfg, SeededRng(seed, EVAL_STREAM | class_id),
                              n_samples=n_samples, return_trace=True)
        return float(np.mean([diversity_metric(c) for c in conds[-1]]))


@dataclass
class FusionResult:
    class_a: int
    class_b: int
    k: int
    ratio_a: float  # |fused mean - centroid a| / |centroid a - centroid b|
    ratio_b: float
    samples: torch.Tensor

    @property
    def between(self) -> bool:
        return 0.2 <= self.ratio_a <= 0.8 and 0.2 <= self.ratio_b <= 0.8


def fusion_experiment(model: TransDiff, spec: SyntheticDatasetSpec, class_a: int, class_b: int,
                      k: int | None = None, n_samples: int = 128, cfg: SamplerConfig | None = None,
                      seed: int = 0, mode: str = "prefix", centroids=None) -> FusionResult:
    """Decode from a condition block built from k tokens of class a and the rest of class b."""
    cfg = cfg or SamplerConfig(steps=20, mode="ode")
    with torch.no_grad():
        (c_a,) = model.encode_conditions(model.assemble_1step(class_a))
        (c_b,) = model.encode_conditions(model.assemble_1step(class_b))
    k = c_a.shape[1] // 2 if k is None else k
    fused = fuse_conditions(c_a[0], c_b[0], k, mode)
    rng = SeededRng(seed, EVAL_STREAM | (class_a << 8) | class_b)
    samples = decode_from_condition(model, fused.expand(n_samples, -1, -1), cfg, rng)
    centroids = centroids or real_centroids(spec)
    m = samples.reshape(n_samples, -1).double().mean(0).numpy()
    ca, cb = centroids[class_a], centroids[class_b]
    gap = float(np.linalg.norm(ca - cb))
    return FusionResult(class_a, class_b, k, float(np.linalg.norm(m - ca)) / gap,
                        float(np.linalg.norm(m - cb)) / gap, samples)
