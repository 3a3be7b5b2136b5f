"""First-order optimizers over flat parameter vectors with a fixed 0/1 update mask.

Entries where the mask is 0 are never written, so frozen values survive
untouched until the mask changes.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

__all__ = ["SGD", "Adam", "make_optimizer"]


class SGD:
    def __init__(self, learning_rate: float):
        if not learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        self.learning_rate = float(learning_rate)

    def step(self, params: np.ndarray, grad: np.ndarray, mask: np.ndarray | None = None) -> None:
        upd = self.learning_rate * grad
        if mask is not None:
            upd = upd * mask
        params -= upd


class Adam:
    """Adam with bias correction; moments are tracked for every coordinate."""

    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1 and eps > 0):
            raise ConfigError("adam needs 0 <= beta1, beta2 < 1 and eps > 0")
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def step(self, params: np.ndarray, grad: np.ndarray, mask: np.ndarray | None = None) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        upd = self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)
        if mask is not None:
            upd = upd * mask
        params -= upd


def make_optimizer(name: str, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    name = name.lower()
    if name == "sgd":
        return SGD(learning_rate)
    if name == "adam":
        return Adam(learning_rate, beta1, beta2, eps)
    raise ConfigError(f"unknown optimizer {name!r} (sgd or adam)")
