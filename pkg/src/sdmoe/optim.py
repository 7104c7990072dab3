"""Minimal in-place optimizers keyed by parameter name."""

from __future__ import annotations

import numpy as np


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        if self.lr != 0.0:
            param -= self.lr * grad


class Adam:
    """Adam with bias correction; each named parameter keeps its own moments."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        m, v, t = self.state.get(name, (np.zeros_like(param), np.zeros_like(param), 0))
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.state[name] = (m, v, t)
        if self.lr == 0.0:
            return
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
