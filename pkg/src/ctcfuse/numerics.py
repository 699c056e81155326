"""Log-space primitives and seeded randomness used by every other module.

Conventions: all grids are 2-D float64 numpy arrays in C (row-major) order,
which is also the on-disk CSV order. Log-probabilities use ``NEG_INF`` as the
sentinel for probability zero; IEEE -inf obeys the required arithmetic
(``x + NEG_INF == NEG_INF``, ``exp(NEG_INF) == 0``). All functions here are
pure; a ``Generator`` returned by :func:`seeded_rng` is single-owner.
"""

from __future__ import annotations

import math
from collections.abc import Iterable

import numpy as np

NEG_INF = float("-inf")


def log_sum_exp(values: Iterable[float]) -> float:
    """log(sum(exp(v) for v in values)), max-shifted for stability.

    Exact when a single value is finite and the rest are NEG_INF; returns
    NEG_INF when every value is NEG_INF. Raises ValueError on an empty input.
    """
    vals = list(values)
    if not vals:
        raise ValueError("log_sum_exp of an empty list")
    m = max(vals)
    if m == NEG_INF:
        return NEG_INF
    acc = 0.0
    n_at_max = 0
    for v in vals:
        if v == m:
            n_at_max += 1
        elif v != NEG_INF:
            acc += math.exp(v - m)
    # log(1) == 0.0 exactly, so a single finite value passes through unchanged
    return m + math.log(n_at_max + acc)


def log_add(a: float, b: float) -> float:
    """Two-argument log_sum_exp, the hot-path form used by beam search."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def row_log_softmax(m: np.ndarray) -> np.ndarray:
    """Normalize each row of a finite matrix to log-probabilities.

    Each output row r satisfies log_sum_exp(r) == 0 to ~1e-15 and keeps the
    argmax of the input row.
    """
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def row_softmax(m: np.ndarray) -> np.ndarray:
    """Probability-space companion of :func:`row_log_softmax`."""
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp_rows(m: np.ndarray) -> np.ndarray:
    """log_sum_exp of each row; rows may contain NEG_INF entries."""
    m = np.asarray(m, dtype=np.float64)
    mx = m.max(axis=-1)
    out = np.where(np.isneginf(mx), NEG_INF, 0.0)
    finite = ~np.isneginf(mx)
    if np.any(finite):
        sub = m[finite] - mx[finite, None]
        out[finite] = mx[finite] + np.log(np.exp(sub).sum(axis=-1))
    return out


def seeded_rng(seed: int) -> np.random.Generator:
    """A deterministic random stream with uniform and Gaussian draws."""
    return np.random.default_rng(seed)
