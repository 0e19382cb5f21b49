"""Correlation and percentile primitives used by trigger construction.

The percentile is deliberately nearest-rank (``ceil(p/100 * n)``, 1-indexed)
so the returned value is always an element actually present in the sample;
interpolated percentiles would fabricate values never observed in the data.
"""

from __future__ import annotations

import math

import numpy as np


def percentile_nearest_rank(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile: element at rank ``ceil(p/100 * n)`` ascending.

    ``p`` must lie in (0, 100]. The result is always a member of ``values``.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("percentile of an empty sample is undefined")
    if not (0.0 < p <= 100.0):
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    if not np.all(np.isfinite(values)):
        raise ValueError("percentile requires finite values")
    # p * n first, then / 100: keeps exact-integer ranks exact in float64.
    rank = math.ceil(p * values.size / 100.0)
    return float(np.sort(values, kind="stable")[rank - 1])


def pearson_matrix(samples: np.ndarray) -> np.ndarray:
    """Pearson correlation matrix of an ``(N, D)`` sample matrix.

    Zero-variance columns correlate 0 against everything (1 on the diagonal)
    instead of producing NaN, so downstream dimension scoring never sees
    non-finite entries. Accumulation runs in float64 regardless of input
    dtype; the result is clipped to [-1, 1] and symmetrized.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an (N, D) sample matrix, got shape {x.shape}")
    n, _ = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples for correlation, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("correlation requires finite samples")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / n
    sigma = np.sqrt(np.diag(cov))
    ok = sigma > 0.0
    denom = np.outer(sigma, sigma)
    denom[~np.outer(ok, ok)] = 1.0  # avoid divide warnings; overwritten below
    r = cov / denom
    r[~np.outer(ok, ok)] = 0.0
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return r
