"""Foresight pruning baselines: random, variance-scaled random, SNIP and Logit-SNIP.

Scores are aligned with the flat parameter layout; bias entries score +inf
so they are never pruned.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .losses import one_hot, quadratic_loss, softmax_cross_entropy
from .masks import check_density, check_scheme, select_mask
from .network import Network, init_glorot, init_variance_scaled, make_rng, round_half_up

__all__ = [
    "METHODS",
    "random_mask",
    "snip_scores",
    "logit_snip_scores",
    "select_mask",
    "baseline_mask",
    "check_method_scheme",
]

METHODS = ("random", "scaled_random", "snip", "layerwise_snip", "logit_snip")


def random_mask(net: Network, density: float, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random kept set with ``round(p * n_l)`` weights in every layer.

    Both schemes use per-layer counts: each weight has the same chance of
    removal, so the global variant has the same expected per-layer fraction.
    """
    density = check_density(density)
    check_scheme(scheme)
    mask = np.ones(net.n_params)
    for b in net.weight_blocks:
        keep = np.zeros(b.size)
        keep[rng.permutation(b.size)[: round_half_up(density * b.size)]] = 1.0
        mask[b.slice] = keep
    return mask


def _saliency(net: Network, params: np.ndarray, objective) -> np.ndarray:
    p = Tensor(np.asarray(params, dtype=np.float64), requires_grad=True)
    (g,) = ad.grad(objective(p), [p])
    scores = np.abs(p.data * g.data)
    scores[~net.weight_indicator()] = np.inf
    return scores


def _targets(net: Network, labels, loss: str) -> np.ndarray:
    if labels is None:
        raise ValueError("SNIP scores need labels")
    labels = np.asarray(labels)
    if labels.ndim == 1:
        return one_hot(labels, net.n_outputs)
    return labels.astype(np.float64)


def snip_scores(net: Network, params: np.ndarray, inputs, labels, loss: str = "softmax_cross_entropy") -> np.ndarray:
    """``|theta * dL/dtheta|`` with ``L`` the loss summed over the batch."""
    y = Tensor(_targets(net, labels, loss))
    x = np.asarray(inputs, dtype=np.float64)
    if loss == "softmax_cross_entropy":
        n = float(x.shape[0])
        objective = lambda p: softmax_cross_entropy(net.forward(p, x), y) * n  # noqa: E731
    elif loss == "quadratic":
        objective = lambda p: quadratic_loss(net.forward(p, x), y)  # noqa: E731
    else:
        raise ConfigError(f"unknown loss {loss!r}")
    return _saliency(net, params, objective)


def logit_snip_scores(net: Network, params: np.ndarray, inputs) -> np.ndarray:
    """``|theta * dZ/dtheta|`` with ``Z = sum_i ||f(x_i)||^2``; label-free."""
    x = np.asarray(inputs, dtype=np.float64)

    def objective(p):
        f = net.forward(p, x)
        return ad.sum_(f * f)

    return _saliency(net, params, objective)


def check_method_scheme(method: str, scheme: str) -> None:
    check_scheme(scheme)
    if method == "snip" and scheme != "global":
        raise ConfigError("snip is a global method; use layerwise_snip for the layerwise scheme")
    if method == "layerwise_snip" and scheme != "layerwise":
        raise ConfigError("layerwise_snip requires the layerwise scheme; use snip for global")


def baseline_mask(
    method: str,
    net: Network,
    density: float,
    scheme: str,
    seed: int,
    inputs=None,
    labels=None,
    loss: str = "softmax_cross_entropy",
) -> tuple[np.ndarray, np.ndarray]:
    """Initial parameters and mask for a baseline method.

    Score-based methods score a Glorot initialization on ``inputs``;
    ``scaled_random`` draws variance-scaled weights instead. Weights come from
    the ``init`` stream of ``seed`` (the same draw an NTT teacher uses) and
    random masks from the ``mask`` stream.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown pruning method {method!r}; choose from {METHODS}")
    check_method_scheme(method, scheme)
    density = check_density(density)
    init_rng, mask_rng = make_rng(seed, "init"), make_rng(seed, "mask")
    if method == "scaled_random":
        params = init_variance_scaled(net, init_rng, density)
        return random_mask(net, density, scheme, mask_rng), params
    params = init_glorot(net, init_rng)
    if method == "random":
        return random_mask(net, density, scheme, mask_rng), params
    if inputs is None:
        raise ConfigError(f"{method} needs a scoring batch")
    if method == "logit_snip":
        scores = logit_snip_scores(net, params, inputs)
    else:
        scores = snip_scores(net, params, inputs, labels, loss)
    return select_mask(net, scores, density, scheme), params
