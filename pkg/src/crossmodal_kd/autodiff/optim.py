from __future__ import annotations

from typing import Mapping

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    pass


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def check_grads(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(f"no gradient for parameter '{name}'")

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        """Apply one update.  ``grads`` defaults to each parameter's ``.grad``."""
        if grads is None:
            self.check_grads()
            grads = {k: p.grad for k, p in self.params.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            # never-touched parameters stay put (including weight decay)
            if not np.any(g) and not np.any(self.m[name]):
                continue
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
