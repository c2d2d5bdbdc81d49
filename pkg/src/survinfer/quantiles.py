"""Nearest-rank (type-1) quantiles, unweighted and weighted.

One convention package-wide: no interpolation, so results are reproducible
across platforms and match a replicate-the-unit-omega-times expansion for
integer weights.
"""

from __future__ import annotations

import math

import numpy as np


def nearest_rank_quantile(values, p: float) -> float:
    """Smallest order statistic with rank >= p * m (type-1)."""
    if not 0 <= p <= 1:
        raise ValueError(f"quantile level must lie in [0, 1], got {p}")
    arr = np.sort(np.asarray(values, dtype=float))
    if arr.size == 0:
        raise ValueError("quantile of empty collection")
    if p == 0:
        return float(arr[0])
    return float(arr[math.ceil(p * arr.size) - 1])


def weighted_nearest_rank_quantile(values, weights, p: float) -> float:
    """Smallest value whose cumulative weight reaches p times the total."""
    if not 0 <= p <= 1:
        raise ValueError(f"quantile level must lie in [0, 1], got {p}")
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if v.size == 0:
        raise ValueError("quantile of empty collection")
    if (w < 0).any():
        raise ValueError("negative weights")
    order = np.argsort(v, kind="stable")
    v, w = v[order], w[order]
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    if p == 0:
        return float(v[0])
    cum = np.cumsum(w)
    idx = int(np.searchsorted(cum, p * total - 1e-12 * total, side="left"))
    return float(v[min(idx, v.size - 1)])
