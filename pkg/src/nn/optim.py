"""First-order optimizers over named parameter matrices.

Parameters are immutable :class:`Matrix` values, so ``step`` returns the updated
mapping instead of mutating in place. Moment buffers are float64.
"""
from __future__ import annotations

from typing import Dict, Mapping

import numpy as np

from src.nn.tape import Matrix


class SGD:
    def __init__(self, learning_rate: float) -> None:
        self.learning_rate = learning_rate

    def step(self, params: Mapping[str, Matrix], grads: Mapping[str, Matrix]) -> Dict[str, Matrix]:
        return {
            name: Matrix(p.data.astype(np.float64) - self.learning_rate * grads[name].data.astype(np.float64))
            for name, p in params.items()
        }


class Adam:
    """Adam with bias correction."""

    def __init__(
        self,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Matrix], grads: Mapping[str, Matrix]) -> Dict[str, Matrix]:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        updated: Dict[str, Matrix] = {}
        for name, p in params.items():
            g = grads[name].data.astype(np.float64)
            m = self._m.get(name, np.zeros_like(g))
            v = self._v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / correction1
            v_hat = v / correction2
            updated[name] = Matrix(
                p.data.astype(np.float64) - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
            )
        return updated


def build_optimizer(name: str, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    if name == "sgd":
        return SGD(learning_rate)
    if name == "adam":
        return Adam(learning_rate, beta1=beta1, beta2=beta2, eps=eps)
    raise ValueError(f"unknown optimizer {name!r}")


__all__ = ["Adam", "SGD", "build_optimizer"]
