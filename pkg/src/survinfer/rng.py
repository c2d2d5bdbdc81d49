"""Deterministic random-stream derivation.

Every stochastic operation in the package takes an explicit seed and derives
its stream through :func:`derive_rng`, a counter-based (Philox) generator
keyed by the master seed plus an integer path. Work items keyed by distinct
paths get independent streams, so any parallel schedule reproduces the
sequential results.
"""

from __future__ import annotations

import numpy as np


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for sub-task ``path`` under ``seed``.

    Same (seed, path) always yields the same stream; distinct paths are
    statistically independent.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))


def child_seed(seed: int, *path: int) -> int:
    """64-bit integer seed for sub-task ``path``; feed to APIs that take seeds."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def srswor_indices(rng: np.random.Generator, n_total: int, n_draw: int) -> np.ndarray:
    """Draw ``n_draw`` distinct indices from ``range(n_total)`` without replacement.

    Partial Fisher-Yates shuffle; the swap targets are drawn in one vectorized
    call so the draw costs O(n_draw) regardless of pool size. Returned indices
    are sorted.
    """
    if n_draw > n_total:
        raise ValueError(f"cannot draw {n_draw} from {n_total} without replacement")
    if n_draw == 0:
        return np.empty(0, dtype=np.intp)
    pool = np.arange(n_total, dtype=np.intp)
    targets = rng.integers(np.arange(n_draw), n_total)
    for i, j in enumerate(targets):
        pool[i], pool[j] = pool[j], pool[i]
    out = pool[:n_draw].copy()
    out.sort()
    return out
