"""Flow matching on the straight path x_t = (1-t)*noise + t*target.

The regression target is the constant velocity target - noise; deterministic
Euler integration of the learned field carries noise at t=0 to a sample at
t=1. Depth maps and action chunks share this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .rng import RngStream


@dataclass
class FlowSample:
    t: torch.Tensor               # () or (B,)
    noise: torch.Tensor
    x_t: torch.Tensor
    target_velocity: torch.Tensor


def _expand_t(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    while t.ndim < like.ndim:
        t = t.unsqueeze(-1)
    return t


def flow_interpolate(target: torch.Tensor, t, noise: torch.Tensor | None = None,
                     rng: RngStream | None = None) -> FlowSample:
    """Build the noised state and its velocity target at time t in [0,1]."""
    if not torch.is_tensor(t):
        t = torch.as_tensor(t, dtype=target.dtype)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError(f"t must lie in [0,1], got {t}")
    if noise is None:
        if rng is None:
            raise ValueError("provide either noise or rng")
        noise = rng.torch_normal(tuple(target.shape), dtype=target.dtype)
    if noise.shape != target.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != target shape {tuple(target.shape)}")
    tb = _expand_t(t.to(target.dtype), target)
    x_t = (1.0 - tb) * noise + tb * target
    return FlowSample(t=t, noise=noise, x_t=x_t, target_velocity=target - noise)


def flow_mse(predicted: torch.Tensor, target_velocity: torch.Tensor,
             sample_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared velocity error over all elements.

    With `sample_weights` (B,), per-sample means are averaged with those
    weights (weight 0 drops a sample, e.g. records without a target).
    """
    if predicted.shape != target_velocity.shape:
        raise ValueError(
            f"predicted shape {tuple(predicted.shape)} != target shape {tuple(target_velocity.shape)}")
    err = (predicted - target_velocity) ** 2
    if sample_weights is None:
        return err.mean()
    per_sample = err.reshape(err.shape[0], -1).mean(dim=1)
    total = sample_weights.sum()
    if float(total) <= 0:
        return torch.zeros((), dtype=predicted.dtype)
    return (per_sample * sample_weights).sum() / total


def euler_integrate(velocity_fn: Callable[[torch.Tensor, float], torch.Tensor],
                    x0: torch.Tensor, steps: int) -> torch.Tensor:
    """x(1) from x(0) with uniform explicit Euler steps of size 1/steps."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = x0
    dt = 1.0 / steps
    for k in range(steps):
        x = x + velocity_fn(x, k * dt) * dt
    return x


def normalize_to_unit(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    """Affine map [lo, hi] -> [-1, 1]."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got {lo} >= {hi}")
    return (x - lo) / (hi - lo) * 2.0 - 1.0


def denormalize_from_unit(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    if not lo < hi:
        raise ValueError(f"need lo < hi, got {lo} >= {hi}")
    return lo + (x + 1.0) / 2.0 * (hi - lo)
