"""AdamW with decoupled weight decay and a cosine-annealed LR schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NonFiniteError


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float
    lr_min: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must be <= lr_max")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def cosine_lr(step: int, sched: CosineSchedule) -> float:
    """Annealed LR at ``step``; step is clamped to [0, total_steps]."""
    s = min(max(int(step), 0), sched.total_steps)
    span = sched.lr_max - sched.lr_min
    return sched.lr_min + 0.5 * span * (1.0 + np.cos(np.pi * s / sched.total_steps))


class AdamW:
    """Per-tensor AdamW state. Moment buffers match each parameter's dtype,
    so the float64 oracle in tests exercises the same code path as the
    float32 training loop."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("betas must be in [0, 1)")
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """One decoupled-decay update, in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, theta in params.items():
            g = grads[name]
            if g.shape != theta.shape:
                raise DimensionError(f"gradient shape mismatch for '{name}'")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for tensor '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            # decay is decoupled and uses the pre-step weights
            if self.weight_decay != 0.0:
                theta -= lr * self.weight_decay * theta
            theta -= lr * update
