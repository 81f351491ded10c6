"""Decoupled-weight-decay AdamW and learning-rate schedules.

Implemented directly on ModelState tensors so freeze flags and moment
buffers stay under our control (and checkpoint-reproducible).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .params import ModelState, ShapeMismatchError


@dataclass(frozen=True)
class OptimizerConfig:
    peak_lr: float
    end_lr: float
    schedule: str = "cosine"  # cosine | linear | constant
    weight_decay: float = 0.0
    warmup_ratio: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.end_lr <= self.peak_lr):
            raise ValueError(f"need 0 < end_lr <= peak_lr, got {self.end_lr} / {self.peak_lr}")
        if not (0.0 <= self.warmup_ratio <= 1.0):
            raise ValueError(f"warmup_ratio must be in [0,1], got {self.warmup_ratio}")
        if self.schedule not in ("cosine", "linear", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def lr_at(cfg: OptimizerConfig, step: int, total_steps: int) -> float:
    """LR at `step` of `total_steps`: linear warmup from 0, then decay to end_lr."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = round(cfg.warmup_ratio * total_steps)
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if cfg.schedule == "constant":
        return cfg.peak_lr
    span = max(total_steps - warmup, 1)
    frac = (step - warmup) / span
    if cfg.schedule == "linear":
        return cfg.peak_lr + (cfg.end_lr - cfg.peak_lr) * frac
    return cfg.end_lr + (cfg.peak_lr - cfg.end_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def optimizer_step(
    state: ModelState,
    grads: dict[str, dict[str, torch.Tensor]],
    cfg: OptimizerConfig,
    step: int,
    lr: float | None = None,
) -> ModelState:
    """One AdamW update on the unfrozen groups; frozen groups untouched.

    `grads` must cover exactly the unfrozen groups. Moment buffers live in
    `state.moments` and persist across calls. Mutates and returns `state`.
    """
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if lr is None:
        lr = cfg.peak_lr
    unfrozen = {g.name for g in state.unfrozen()}
    if set(grads) != unfrozen:
        raise ValueError(f"grads cover {sorted(grads)} but unfrozen groups are {sorted(unfrozen)}")
    beta1, beta2 = cfg.betas
    bias1 = 1.0 - beta1 ** step
    bias2 = 1.0 - beta2 ** step
    with torch.no_grad():
        for gname in sorted(grads):
            group = state.groups[gname]
            gdict = grads[gname]
            if set(gdict) != set(group.tensors):
                missing = set(group.tensors) ^ set(gdict)
                raise ValueError(f"group {gname!r}: grad names mismatch {sorted(missing)}")
            for tname, p in group.named():
                g = gdict[tname]
                if tuple(g.shape) != tuple(p.shape):
                    raise ShapeMismatchError(
                        f"{gname}/{tname}: grad shape {tuple(g.shape)} vs param {tuple(p.shape)}")
                key = f"{gname}/{tname}"
                if key not in state.moments:
                    state.moments[key] = (torch.zeros_like(p), torch.zeros_like(p))
                m, v = state.moments[key]
                if cfg.weight_decay:
                    p.mul_(1.0 - lr * cfg.weight_decay)
                m.mul_(beta1).add_(g, alpha=1.0 - beta1)
                v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
                denom = (v / bias2).sqrt_().add_(cfg.eps)
                p.addcdiv_(m, denom, value=-lr / bias1)
    state.step = step
    return state


def clip_grads_(grads: dict[str, dict[str, torch.Tensor]], max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    sq = 0.0
    for gdict in grads.values():
        for g in gdict.values():
            sq += float(g.double().pow(2).sum())
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for gdict in grads.values():
            for g in gdict.values():
                g.mul_(scale)
    return norm
