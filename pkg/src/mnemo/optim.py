"""Gradient descent with momentum and cosine learning-rate decay."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class SGDM:
    """Momentum SGD over an explicit parameter list.

    step() consumes and clears .grad on each parameter; parameters whose
    grad is None are skipped. Gradients are clipped by global norm before
    the update to keep the tiny-model training numerically tame.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 0.05,
        momentum: float = 0.9,
        total_steps: int | None = None,
        min_lr_frac: float = 0.1,
        clip_norm: float = 1.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.total_steps = total_steps
        self.min_lr_frac = min_lr_frac
        self.clip_norm = clip_norm
        self.t = 0
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        frac = min(self.t / self.total_steps, 1.0)
        lo = self.lr * self.min_lr_frac
        return lo + 0.5 * (1.0 + math.cos(math.pi * frac)) * (self.lr - lo)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        lr = self.current_lr()
        self.t += 1
        grads = [p.grad for p in self.params]
        if self.clip_norm:
            sq = sum(float((g * g).sum()) for g in grads if g is not None)
            norm = math.sqrt(sq)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = [None if g is None else g * scale for g in grads]
        for p, v, g in zip(self.params, self._velocity, grads):
            if g is None:
                continue
            v *= self.momentum
            v += g
            p.data = p.data - lr * v
        self.zero_grad()
