"""Parameter update rules.

Adam is the training default (lr 1e-4, betas 0.9/0.999); plain SGD exists
for hand-checkable tests. Both skip the update and log when a gradient is
non-finite, leaving parameters untouched for that step.
"""

from __future__ import annotations

import logging

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class SGD:
    def __init__(self, params, lr=0.1):
        self.params = list(params)
        self.lr = lr
        self.skipped_steps = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        grads = [p.grad for p in self.params]
        if any(g is not None and not np.isfinite(g).all() for g in grads):
            self.skipped_steps += 1
            log.warning("SGD: non-finite gradient, step skipped (%d total)", self.skipped_steps)
            return False
        for p, g in zip(self.params, grads):
            if g is not None:
                p.data -= self.lr * g
        return True


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.skipped_steps = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        grads = [p.grad for p in self.params]
        if any(g is not None and not np.isfinite(g).all() for g in grads):
            self.skipped_steps += 1
            log.warning("Adam: non-finite gradient, step skipped (%d total)", self.skipped_steps)
            return False
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
        return True
