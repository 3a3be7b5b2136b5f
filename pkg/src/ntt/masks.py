"""Exact-count mask selection shared by magnitude pruning and the score-based baselines."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .network import Network, round_half_up

__all__ = [
    "SCHEMES",
    "check_density",
    "check_scheme",
    "select_mask",
    "magnitude_mask",
    "kept_counts",
    "target_counts",
]

SCHEMES = ("layerwise", "global")


def check_density(density: float) -> float:
    density = float(density)
    if not 0.0 < density <= 1.0:
        raise ConfigError(f"density must be in (0, 1], got {density}")
    return density


def check_scheme(scheme: str) -> str:
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    return scheme


def _keep_top(scores: np.ndarray, k: int) -> np.ndarray:
    # stable ascending sort: among equal scores the lower index is pruned first
    keep = np.zeros(scores.size)
    order = np.argsort(scores, kind="stable")
    keep[order[scores.size - k:]] = 1.0
    return keep


def select_mask(net: Network, scores: np.ndarray, density: float, scheme: str = "layerwise") -> np.ndarray:
    """Keep the highest-scoring weights at exact counts; biases are always kept.

    ``layerwise`` keeps ``round(p * n_l)`` weights in every layer, ``global``
    keeps ``round(p * n_total)`` weights overall.
    """
    density = check_density(density)
    check_scheme(scheme)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (net.n_params,):
        raise ValueError(f"scores must have length {net.n_params}, got {scores.shape}")
    if np.any(np.isnan(scores)):
        raise ValueError("scores contain NaN")
    mask = np.ones(net.n_params)
    blocks = net.weight_blocks
    if scheme == "layerwise":
        for b in blocks:
            mask[b.slice] = _keep_top(scores[b.slice], round_half_up(density * b.size))
    else:
        flat = np.concatenate([scores[b.slice] for b in blocks])
        keep = _keep_top(flat, round_half_up(density * flat.size))
        offset = 0
        for b in blocks:
            mask[b.slice] = keep[offset:offset + b.size]
            offset += b.size
    return mask


def magnitude_mask(net: Network, params: np.ndarray, density: float, scheme: str = "layerwise") -> np.ndarray:
    """Keep the largest-magnitude weights; ties prune the lower flat index first."""
    return select_mask(net, np.abs(np.asarray(params, dtype=np.float64)), density, scheme)


def kept_counts(net: Network, mask: np.ndarray) -> dict[int, int]:
    """Kept weights per parametric layer index."""
    return {b.layer: int(np.count_nonzero(mask[b.slice])) for b in net.weight_blocks}


def target_counts(net: Network, density: float, scheme: str) -> dict[int, int] | int:
    """Exact kept-weight counts required by ``scheme`` (per layer, or a single total)."""
    if scheme == "layerwise":
        return {b.layer: round_half_up(density * b.size) for b in net.weight_blocks}
    return round_half_up(density * net.n_weights)
