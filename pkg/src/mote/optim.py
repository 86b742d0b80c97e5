"""AdamW with decoupled weight decay, plus the cosine learning-rate curve."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class AdamW:
    def __init__(self, params: list[Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        """Apply one update from the accumulated grads; skips grad-less params."""
        if lr is None:
            lr = self.lr
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.steps
        bias2 = 1.0 - b2 ** self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Half-cosine decay from base_lr at epoch 0 toward 0 at total_epochs."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))
