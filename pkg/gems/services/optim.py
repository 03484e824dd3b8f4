"""ADAM over a dict of named numpy arrays, shared by the GCN and the fitness predictor."""
from __future__ import annotations

from typing import Dict

import numpy as np

ParamDict = Dict[str, np.ndarray]


class Adam:
    """In-place ADAM updates; parameters missing from a gradient dict are left alone."""

    def __init__(self, params: ParamDict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(value) for name, value in params.items()}
        self._v = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, params: ParamDict, grads: ParamDict, lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads.items():
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            params[name] -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def learning_rate(base: float, epoch: int, warmup: int, decay: float) -> float:
    """Linear warm-up over ``warmup`` epochs, exponential decay afterwards."""
    if epoch < warmup:
        return base * (epoch + 1) / warmup
    return base * decay ** (epoch - warmup)
