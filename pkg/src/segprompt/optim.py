"""Adam optimizer over named parameter lists."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, Tensor]]) -> None:
        """Apply one update to every named tensor; frozen tensors never appear
        here, and a trainable tensor without a gradient is a contract bug."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params:
            if p.grad is None:
                raise ContractError(f"parameter '{name}' is trainable but has no gradient")
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def step(optimizer: Adam, params: list[tuple[str, Tensor]]) -> None:
    optimizer.step(params)


def zero_grads(params: list[tuple[str, Tensor]]) -> None:
    for _, p in params:
        p.grad = None
