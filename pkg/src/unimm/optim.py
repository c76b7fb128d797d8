"""AdamW with decoupled weight decay and an optional global-norm gradient clip."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .numerics import NumericsError, Parameter


class AdamW:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, max_grad_norm: float | None = None):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.state: dict[str, list] = {}

    def step(self, params: Sequence[Parameter], lr: float | None = None) -> float:
        """Update ``params`` in place from their ``.grad``; returns the pre-clip grad norm."""
        lr = self.lr if lr is None else lr
        sq = 0.0
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericsError(f"non-finite gradient in {p.name}")
            sq += float(np.sum(p.grad * p.grad))
        norm = math.sqrt(sq)
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        for p in params:
            g = p.grad * scale if scale != 1.0 else p.grad
            st = self.state.get(p.name)
            if st is None:
                st = self.state[p.name] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
            m, v, n = st
            n += 1
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            st[2] = n
            if p.decay and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            mhat = m / (1 - self.beta1 ** n)
            vhat = v / (1 - self.beta2 ** n)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
        return norm
