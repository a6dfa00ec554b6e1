"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np


class AdamState:
    def __init__(self, store, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.entries.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.entries.items()}

    def adam_step(self):
        """One update over all parameters. Gradients are left untouched."""
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        for name, p in self.store.entries.items():
            g = p.grad
            if name not in self.m:  # parameter created after optimizer setup
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = self.lr * self.store.lr_scale(name)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
