"""AdamW with decoupled weight decay, and the warmup + cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autograd import NonFiniteError, Tensor

__all__ = ["AdamWHyper", "AdamWState", "adamw_step", "LrSchedule", "lr_at"]


@dataclass(frozen=True)
class AdamWHyper:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.0


class AdamWState:
    """First/second moment buffers per trainable parameter, plus step count."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
    lr: float | Mapping[str, float],
    hyper: AdamWHyper = AdamWHyper(),
) -> None:
    """One bias-corrected AdamW update, in place.

    Decoupled weight decay is applied multiplicatively (p <- p - lr*wd*p)
    before the adaptive term. Only trainable parameters may be passed;
    ``lr`` is either a scalar or a per-name mapping covering every name.
    """
    if params.keys() != state.m.keys():
        raise ValueError("adamw_step: params do not match optimizer state")
    missing = params.keys() - grads.keys()
    if missing:
        raise ValueError(f"adamw_step: missing gradients for {sorted(missing)[:3]}")
    t = state.t + 1
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param shape {p.shape} ({name})")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adamw_step: non-finite gradient for '{name}'")
        step_lr = lr if isinstance(lr, float) else lr[name]
        if hyper.weight_decay:
            p.data *= 1.0 - step_lr * hyper.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        p.data -= step_lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
    state.t = t


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to the peak, then cosine decay to the floor."""

    peak: float
    warmup_steps: int
    total_steps: int
    floor: float = 0.0

    def __post_init__(self):
        if not (0 < self.warmup_steps < self.total_steps):
            raise ValueError(f"need 0 < warmup ({self.warmup_steps}) < total ({self.total_steps})")
        if self.floor > self.peak:
            raise ValueError(f"floor {self.floor} exceeds peak {self.peak}")


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Learning rate at an integer step in [0, total]."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak * (step + 1) / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.floor + 0.5 * (schedule.peak - schedule.floor) * (1.0 + math.cos(math.pi * progress))
