"""Finite-difference check of the joint loss over every model parameter."""
from __future__ import annotations

import torch
from torch.func import functional_call

from .model import ModelConfig, TransDiff
from .numeric import SeededRng, grad_check, rng_normal, rng_uniform


def joint_loss_objective(model_cfg: ModelConfig, seed: int = 0, n_refs: int | None = None, batch: int = 2):
    """(objective, theta0): the joint loss as a function of the flat parameter vector.

    Parameters are randomised (zero-initialised projections included) so every
    path carries gradient. The batch mixes a dropped and a kept condition.
    """
    torch.manual_seed(seed)
    model = TransDiff(model_cfg)
    rng = SeededRng(seed, 99)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.2 * rng_normal(rng, p.shape, dtype=p.dtype))
    n_refs = min(2, model_cfg.max_references) if n_refs is None else n_refs
    latents = rng_normal(rng, (batch, n_refs + 1, *model_cfg.latent_shape))
    eps = rng_normal(rng, latents.shape)
    t = rng_uniform(rng, (batch, n_refs + 1))
    classes = torch.arange(batch) % model_cfg.n_classes
    drop = torch.arange(batch) == 0

    named = list(model.named_parameters())
    sizes = [p.numel() for _, p in named]
    theta0 = torch.cat([p.detach().reshape(-1) for _, p in named])

    def objective(theta: torch.Tensor) -> torch.Tensor:
        params = {n: chunk.reshape(p.shape) for (n, p), chunk in zip(named, theta.split(sizes))}
        return functional_call(model, params, (classes, latents, t, eps, drop))

    return objective, theta0


def joint_loss_grad_check(model_cfg: ModelConfig, seed: int = 0, step: float = 1e-3, order: int = 4,
                          batch_size: int | None = 256) -> float:
    """Max relative error between autograd and central differences of the joint loss."""
    objective, theta0 = joint_loss_objective(model_cfg, seed)
    return grad_check(objective, theta0, step=step, order=order, batch_size=batch_size)
