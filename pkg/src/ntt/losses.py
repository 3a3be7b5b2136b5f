"""Supervised losses on autodiff tensors."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["quadratic_loss", "softmax_cross_entropy", "one_hot", "LOSSES"]


def _check(outputs: Tensor, targets: Tensor) -> None:
    if outputs.shape != targets.shape:
        raise ValueError(f"shape mismatch: outputs {outputs.shape}, targets {targets.shape}")


def quadratic_loss(outputs, targets) -> Tensor:
    """``1/2 * sum((f - y)^2)`` over all entries."""
    outputs, targets = ad.as_tensor(outputs), ad.as_tensor(targets)
    _check(outputs, targets)
    r = outputs - targets
    return 0.5 * ad.sum_(r * r)


def softmax_cross_entropy(logits, one_hot_labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[true class]``."""
    logits, labels = ad.as_tensor(logits), ad.as_tensor(one_hot_labels)
    _check(logits, labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("logits must be a non-empty (n, c) array")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))  # constant: cancels in the gradient
    z = logits - shift
    lse = ad.log(ad.sum_(ad.exp(z), axis=1))
    picked = ad.sum_(z * labels, axis=1)
    return ad.sum_(lse - picked) / float(logits.shape[0])


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"labels must be integers in [0, {n_classes})")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out


LOSSES = {
    "softmax_cross_entropy": softmax_cross_entropy,
    "quadratic": quadratic_loss,
}
