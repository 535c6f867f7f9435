"""Reverse-time integrators: Euler ODE, scaled Euler-Maruyama SDE, and guidance."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from .flow import velocity_to_score
from .numeric import SeededRng, rng_normal

VelocityFn = Callable[[torch.Tensor, float], torch.Tensor]

SIGMA_FORMS = ("sqrt", "standard")
SIGMA_SCHEDULES = ("linear", "constant")
MODES = ("ode", "sde")


@dataclass
class SamplerConfig:
    """Sampling hyper-parameters.

    ``sigma_schedule`` picks sigma(t) = sigma_base * t ("linear", default) or
    sigma(t) = sigma_base ("constant"). ``sigma_form`` picks the noise amplitude:
    sqrt(sigma(t)) ("sqrt") or sigma(t) ("standard").
    """

    steps: int = 50
    s1: float = 1.0
    s2: float = 1.0
    sigma_base: float = 1.0
    sigma_form: str = "sqrt"
    sigma_schedule: str = "linear"
    t_floor: float = 1e-3
    cfg_scale: float = 1.0
    mode: str = "ode"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.sigma_base < 0:
            raise ValueError("sigma_base must be >= 0")
        if self.t_floor <= 0:
            raise ValueError("t_floor must be > 0")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.sigma_form not in SIGMA_FORMS:
            raise ValueError(f"sigma_form must be one of {SIGMA_FORMS}")
        if self.sigma_schedule not in SIGMA_SCHEDULES:
            raise ValueError(f"sigma_schedule must be one of {SIGMA_SCHEDULES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def sigma(self, t: float) -> float:
        if self.sigma_schedule == "constant":
            return self.sigma_base
        return self.sigma_base * t

    def amplitude(self, t: float) -> float:
        s = self.sigma(t)
        return math.sqrt(s) if self.sigma_form == "sqrt" else s


def ode_step(x: torch.Tensor, v: torch.Tensor, dt: float) -> torch.Tensor:
    if x.shape != v.shape:
        raise ValueError("x and v shapes differ")
    return x + v * dt


def em_sde_step(
    x: torch.Tensor,
    t: float,
    dt: float,
    v: torch.Tensor,
    cfg: SamplerConfig,
    rng: SeededRng,
) -> torch.Tensor:
    """One scaled Euler-Maruyama step backwards in time.

    drift = v - sigma(t)^2 / 2 * score, with the score derived from v;
    x + s1 * drift * dt + s2 * amp(t) * sqrt(|dt|) * z.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if dt >= 0:
        raise ValueError("dt must be negative (reverse time)")
    if x.shape != v.shape:
        raise ValueError("x and v shapes differ")
    sigma = cfg.sigma(t)
    score = velocity_to_score(v, x, t, cfg.t_floor)
    drift = v - (0.5 * sigma**2) * score
    z = rng_normal(rng, x.shape, dtype=x.dtype)
    noise = (cfg.s2 * cfg.amplitude(t) * math.sqrt(-dt)) * z
    return x + cfg.s1 * drift * dt + noise


def cfg_combine(v_cond: torch.Tensor, v_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """v_uncond + w (v_cond - v_uncond); w = 1 and w = 0 return the inputs unchanged."""
    if v_cond.shape != v_uncond.shape:
        raise ValueError("conditional and unconditional velocities differ in shape")
    if w == 1:
        return v_cond
    if w == 0:
        return v_uncond
    return v_uncond + w * (v_cond - v_uncond)


def time_grid(steps: int) -> list[float]:
    """Uniform grid from t = 1 down to t = 0 (inclusive), steps + 1 points."""
    return [1.0 - i / steps for i in range(steps)] + [0.0]


def sample_latent(
    velocity_fn: VelocityFn,
    uncond_velocity_fn: Optional[VelocityFn],
    cfg: SamplerConfig,
    shape: Sequence[int],
    rng: SeededRng,
) -> torch.Tensor:
    """Integrate from a standard-normal draw at t = 1 to t = 0.

    Guidance is applied only when an unconditional velocity is supplied and
    ``cfg.cfg_scale != 1``; at scale 1 the unconditional branch is never run.
    """
    x = rng_normal(rng, shape)
    grid = time_grid(cfg.steps)
    guided = uncond_velocity_fn is not None and cfg.cfg_scale != 1
    dt = -1.0 / cfg.steps
    for t in grid[:-1]:
        v = velocity_fn(x, t)
        if guided:
            v = cfg_combine(v, uncond_velocity_fn(x, t), cfg.cfg_scale)
        if cfg.mode == "ode":
            x = ode_step(x, v, dt)
        else:
            x = em_sde_step(x, t, dt, v, cfg, rng)
    return x
