"""Gradient verification: analytic (autograd) vs central finite differences.

The whole state is temporarily promoted to float64 so the finite-difference
oracle is trustworthy; the original float32 data is restored afterwards.
Frozen groups are excluded from the report entirely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .params import ModelState
from .rng import RngStream


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    tolerance: float
    # "group/tensor" -> max relative deviation over checked entries
    deviations: dict[str, float]

    @property
    def max_deviation(self) -> float:
        return max(self.deviations.values()) if self.deviations else 0.0

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tolerance

    def summary(self) -> str:
        lines = [f"grad_check: {'PASS' if self.passed else 'FAIL'} (tolerance {self.tolerance:g})"]
        for key, dev in sorted(self.deviations.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {key}: {dev:.3e}")
        return "\n".join(lines)


def _eval_loss(loss_fn: Callable[[ModelState], torch.Tensor], state: ModelState) -> torch.Tensor:
    loss = loss_fn(state)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"loss is non-finite: {float(loss)}")
    return loss


def grad_check(
    loss_fn: Callable[[ModelState], torch.Tensor],
    state: ModelState,
    tolerance: float = 1e-4,
    max_entries_per_tensor: int = 24,
    h: float = 1e-5,
    rel_floor: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients against central differences at float64.

    loss_fn must be deterministic (draw its randomness from fixed streams).
    Entries are subsampled per tensor when larger than
    `max_entries_per_tensor`. Relative deviation uses a floor so exact-zero
    gradients do not divide by zero.
    """
    saved = {}
    for g in state.groups.values():
        for tname, t in g.tensors.items():
            saved[(g.name, tname)] = t.detach().clone()
            t.data = t.data.to(torch.float64)

    stream = RngStream(seed, "gradcheck")
    deviations: dict[str, float] = {}
    try:
        unfrozen = [(g.name, tname, t) for g in state.unfrozen() for tname, t in g.named()]
        loss = _eval_loss(loss_fn, state)
        tensors = [t for _, _, t in unfrozen]
        analytic = torch.autograd.grad(loss, tensors, allow_unused=True)

        with torch.no_grad():
            for (gname, tname, t), grad in zip(unfrozen, analytic):
                flat = t.view(-1)
                n = flat.numel()
                if n <= max_entries_per_tensor:
                    idx = range(n)
                else:
                    idx = sorted(int(i) for i in stream.child(f"{gname}/{tname}").choice(n, max_entries_per_tensor))
                ga = torch.zeros(n, dtype=torch.float64) if grad is None else grad.reshape(-1)
                worst = 0.0
                for i in idx:
                    orig = float(flat[i])
                    step = h * max(1.0, abs(orig))
                    flat[i] = orig + step
                    f_plus = float(_eval_loss(loss_fn, state))
                    flat[i] = orig - step
                    f_minus = float(_eval_loss(loss_fn, state))
                    flat[i] = orig
                    fd = (f_plus - f_minus) / (2.0 * step)
                    a = float(ga[i])
                    rel = abs(a - fd) / max(abs(a), abs(fd), rel_floor)
                    worst = max(worst, rel)
                deviations[f"{gname}/{tname}"] = worst
    finally:
        for g in state.groups.values():
            for tname, t in g.tensors.items():
                t.data = saved[(g.name, tname)]

    return GradCheckReport(tolerance=tolerance, deviations=deviations)
