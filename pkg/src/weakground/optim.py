"""Adam optimizer over named parameter dicts, plus the cosine decay schedule."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


def cosine_lr(base_lr: float, t: float, total: float) -> float:
    """lr(t) = lr0 * 0.5 * (1 + cos(pi * t / total)); lr(0)=lr0, lr(total)=0."""
    return float(base_lr * 0.5 * (1.0 + np.cos(np.pi * t / total)))


class Adam:
    """Standard Adam with bias correction. A step with all-zero gradients
    leaves parameters exactly unchanged."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - self.lr * update
