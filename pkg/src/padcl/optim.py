from __future__ import annotations

import numpy as np

from .numcore import ParameterStore


class AdamW:
    """Adam with decoupled weight decay, updating store arrays in place."""

    def __init__(self, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def reset(self) -> None:
        self.m.clear()
        self.v.clear()
        self.steps.clear()

    def step(self, store: ParameterStore, grads: dict[str, np.ndarray]) -> None:
        for name in sorted(grads):
            p = store[name]
            g = grads[name].astype(p.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.steps[name] = 0
            self.steps[name] += 1
            n = self.steps[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** n)
            vhat = v / (1 - self.b2 ** n)
            if self.weight_decay:
                p *= p.dtype.type(1 - self.lr * self.weight_decay)
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
