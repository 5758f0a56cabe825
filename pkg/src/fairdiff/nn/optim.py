"""Adaptive-moment optimiser with optional decoupled weight decay."""

from __future__ import annotations

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


class Adam:
    """Adam / AdamW over a fixed parameter list.

    ``params`` may be a list or a ``{name: Parameter}`` mapping; names only
    feed error messages. Frozen parameters are skipped and keep their values.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if isinstance(params, dict):
            self.names = list(params)
            self.params = list(params.values())
        else:
            self.params = list(params)
            self.names = [p.name or f"param{i}" for i, p in enumerate(self.params)]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for name, p in zip(self.names, self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            if p.frozen or not p.trainable:
                p.grad = None
                continue
            g = p.grad if p.grad is not None else 0.0
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            if self.weight_decay:
                update = update + self.lr * self.weight_decay * p.data
            p.data = p.data - update
            p.grad = None
