"""Rectified-flow path, velocity target, loss and the velocity-to-score conversion."""
from __future__ import annotations

from dataclasses import dataclass

import torch


def _same_shape(*tensors: torch.Tensor) -> None:
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"shape mismatch: {tuple(shape)} vs {tuple(t.shape)}")


def _time_like(t, ref: torch.Tensor) -> torch.Tensor:
    """Broadcast a scalar or per-leading-index time against ``ref``."""
    t = torch.as_tensor(t, dtype=ref.dtype)
    while t.dim() < ref.dim():
        t = t.unsqueeze(-1)
    return t


def interpolate(x: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Straight-line path (1 - t) x + t eps.

    ``t`` is a scalar or a tensor over the leading (batch) axes.
    """
    _same_shape(x, eps)
    tt = torch.as_tensor(t)
    if bool(((tt < 0) | (tt > 1)).any()):
        raise ValueError("t must lie in [0, 1]")
    tt = _time_like(t, x)
    return (1 - tt) * x + tt * eps


def velocity_target(x: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    _same_shape(x, eps)
    return eps - x


def flow_loss(v_pred: torch.Tensor, x: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between ``v_pred`` and the rectified-flow target."""
    _same_shape(v_pred, x, eps)
    return ((velocity_target(x, eps) - v_pred) ** 2).mean()


def velocity_to_score(v: torch.Tensor, x_t: torch.Tensor, t, t_floor: float = 1e-3) -> torch.Tensor:
    """Score of the noisy marginal implied by a rectified-flow velocity.

    With x_t = (1 - t) x + t eps and v = eps - x, the noise estimate is
    x_t + (1 - t) v and the score is -noise / t. ``t`` is clamped below by
    ``t_floor`` to keep the data end finite.
    """
    if t_floor <= 0:
        raise ValueError("t_floor must be positive")
    _same_shape(v, x_t)
    tt = _time_like(t, x_t)
    eps_hat = x_t + (1 - tt) * v
    return -eps_hat / torch.clamp(tt, min=t_floor)


def recover_endpoints(v: torch.Tensor, x_t: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor]:
    """(x_hat, eps_hat) consistent with x_t and v on the straight path."""
    tt = _time_like(t, x_t)
    return x_t - tt * v, x_t + (1 - tt) * v


@dataclass
class FlowSample:
    x: torch.Tensor
    eps: torch.Tensor
    t: float
    x_t: torch.Tensor

    @classmethod
    def draw(cls, x: torch.Tensor, eps: torch.Tensor, t: float) -> "FlowSample":
        return cls(x, eps, t, interpolate(x, eps, t))

    @property
    def target(self) -> torch.Tensor:
        return velocity_target(self.x, self.eps)
