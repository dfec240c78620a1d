"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0, warmup: int = 0) -> float:
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if total_steps <= warmup:
        return base_lr
    progress = min(max(step - warmup, 0) / max(total_steps - warmup, 1), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    def __init__(self, params: dict, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, no_decay=(), lr_scale: dict | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        # per-parameter learning-rate multipliers (1 for keys not listed)
        self.lr_scale = dict(lr_scale or {})
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None, clip_norm: float | None = None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        scale = 1.0
        if clip_norm is not None:
            total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values() if p.grad is not None))
            if total > clip_norm:
                scale = clip_norm / (total + 1e-12)
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for key in sorted(self.params):
            p = self.params[key]
            if p.grad is None:
                continue
            g = p.grad * scale
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            key_lr = lr * self.lr_scale.get(key, 1.0)
            if self.weight_decay and key not in self.no_decay:
                p.data *= 1.0 - key_lr * self.weight_decay
            p.data -= key_lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
