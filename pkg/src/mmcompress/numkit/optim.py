"""Adam with optional cosine decay over a fixed step budget."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    cosine_steps: int | None = None
    warmup_steps: int = 0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        lr = self.lr
        if self.warmup_steps and self.t < self.warmup_steps:
            lr *= (self.t + 1) / self.warmup_steps
        if self.cosine_steps:
            frac = min(self.t / self.cosine_steps, 1.0)
            lr *= 0.5 * (1.0 + math.cos(math.pi * frac))
        return lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place from ``grads`` (missing grads count as zero)."""
        if self.grad_clip is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            scale = min(1.0, self.grad_clip / (total + 1e-12))
        else:
            scale = 1.0
        lr = self.current_lr()
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            g = g * scale
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
