"""Numeric core: precision switch, counter-based seeded RNG and a gradient checker.

Tensors and reverse-mode differentiation come from torch. Random draws do not:
they come from a Philox counter-based generator keyed by ``(seed, stream)`` so
that the draw sequence of a stream never depends on evaluation order.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch

_DTYPES = {"float32": torch.float32, "float64": torch.float64}

_U53 = 2.0 ** -53


def set_precision(name: str) -> None:
    """Select the global float width ("float32" or "float64")."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    torch.set_default_dtype(_DTYPES[name])


def get_dtype() -> torch.dtype:
    return torch.get_default_dtype()


class precision:
    """Context manager that temporarily switches the global float width."""

    def __init__(self, name: str):
        self.name = name
        self._saved = None

    def __enter__(self):
        self._saved = torch.get_default_dtype()
        set_precision(self.name)
        return self

    def __exit__(self, *exc):
        torch.set_default_dtype(self._saved)
        return False


class SeededRng:
    """Reproducible random stream keyed by ``(seed, stream)``.

    The underlying Philox generator is counter based, so two instances built
    from the same key produce the same draws on every platform.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not (0 <= seed < 2**64 and 0 <= stream < 2**64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream = int(stream)
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self.counter = 0  # raw 64-bit words consumed

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def spawn(self, stream: int) -> "SeededRng":
        """A fresh generator with the same seed and another stream id."""
        return SeededRng(self.seed, stream)

    def _raw(self, n: int) -> np.ndarray:
        self.counter += n
        return self._bitgen.random_raw(n)

    def uniform(self, shape: Sequence[int] | int) -> np.ndarray:
        """Float64 draws on the half-open interval (0, 1]."""
        shape = _as_shape(shape)
        n = math.prod(shape)
        words = self._raw(n)
        return (((words >> np.uint64(11)).astype(np.float64) + 1.0) * _U53).reshape(shape)

    def normal(self, shape: Sequence[int] | int) -> np.ndarray:
        """Float64 standard-normal draws by Box-Muller."""
        shape = _as_shape(shape)
        n = math.prod(shape)
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(u[:m]))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n].reshape(shape)

    def integers(self, high: int, shape: Sequence[int] | int) -> np.ndarray:
        """Integers uniform on ``[0, high)``."""
        if high <= 0:
            raise ValueError("high must be positive")
        u = self.uniform(shape)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, int):
        shape = (shape,)
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"shape extents must be positive, got {shape}")
    return shape


def rng_normal(rng: SeededRng, shape: Sequence[int] | int, dtype: torch.dtype | None = None) -> torch.Tensor:
    """I.i.d. standard normal tensor drawn from ``rng`` in the global precision."""
    return torch.from_numpy(rng.normal(shape)).to(dtype or get_dtype())


def rng_uniform(rng: SeededRng, shape: Sequence[int] | int, dtype: torch.dtype | None = None) -> torch.Tensor:
    return torch.from_numpy(rng.uniform(shape)).to(dtype or get_dtype())


_STENCILS = {
    2: ((1.0, 0.5), (-1.0, -0.5)),
    4: ((2.0, -1.0 / 12), (1.0, 8.0 / 12), (-1.0, -8.0 / 12), (-2.0, 1.0 / 12)),
}


def _checked(values: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(values).all()):
        raise FloatingPointError("non-finite objective")
    return values


def _numeric_gradient(fn, x: torch.Tensor, step: float, order: int, batch_size: int | None) -> torch.Tensor:
    flat = x.reshape(-1)
    n = flat.numel()
    grad = torch.zeros(n, dtype=torch.float64)
    if batch_size is None:
        for i in range(n):
            acc = 0.0
            for offset, weight in _STENCILS[order]:
                y = flat.clone()
                y[i] += offset * step
                acc += weight * float(_checked(fn(y.reshape(x.shape)).reshape(())))
            grad[i] = acc / step
        return grad
    batched = torch.func.vmap(lambda v: fn(v.reshape(x.shape)).reshape(()))
    for lo in range(0, n, batch_size):
        idx = torch.arange(lo, min(lo + batch_size, n))
        acc = torch.zeros(len(idx), dtype=torch.float64)
        for offset, weight in _STENCILS[order]:
            ys = flat.repeat(len(idx), 1)
            ys[torch.arange(len(idx)), idx] += offset * step
            acc += weight * _checked(batched(ys)).double()
        grad[idx] = acc / step
    return grad


def grad_check(
    fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    step: float = 1e-6,
    order: int = 2,
    batch_size: int | None = None,
) -> float:
    """Compare the autograd gradient of a scalar ``fn`` at ``point`` with central differences.

    Returns the max over coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    ``order`` selects the 2-point (default) or 4th-order 5-point central stencil.
    With ``batch_size`` the perturbed evaluations run in chunks through
    ``torch.func.vmap``; ``fn`` must then be vmap-compatible.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in _STENCILS:
        raise ValueError("order must be 2 or 4")
    x = point.detach().clone().requires_grad_(True)
    loss = fn(x)
    if loss.numel() != 1:
        raise ValueError("objective must be scalar")
    _checked(loss.detach())
    (analytic,) = torch.autograd.grad(loss, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1).double()
    with torch.no_grad():
        numeric = _numeric_gradient(fn, point.detach().clone(), step, order, batch_size)
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.tensor(1e-8, dtype=torch.float64))
    return float(((analytic - numeric).abs() / denom).max())
