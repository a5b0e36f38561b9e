"""Pure-numpy reference kernels.

These define the exact arithmetic the compiled kernels must reproduce bit
for bit: same operation order, same tree shape for reductions.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def pairwise_sum(x: np.ndarray) -> float:
    """Sum with a fixed binary tree (zero-padded to a power of two)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return 0.0
    size = 1
    while size < n:
        size <<= 1
    buf = np.zeros(size, dtype=np.float64)
    buf[:n] = x
    while size > 1:
        buf = buf[0::2] + buf[1::2]
        size >>= 1
    return float(buf[0])


def splitmix_keys(seed: int, n: int) -> np.ndarray:
    """SplitMix64 output for counters 0..n-1 under ``seed``.

    Counter-based: key i depends only on (seed, i).
    """
    with np.errstate(over="ignore"):
        z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + (np.arange(n, dtype=np.uint64) + np.uint64(1)) * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        z = z ^ (z >> np.uint64(31))
    return z


def pseudo_outcomes(
    mu: np.ndarray, label: np.ndarray, annotated: np.ndarray, score: np.ndarray, weight: np.ndarray
) -> np.ndarray:
    """weight * (mu + A/pi * (M - mu)); unannotated rows give weight * mu."""
    mu = np.asarray(mu, dtype=np.float64)
    a = np.asarray(annotated, dtype=bool)
    out = mu.copy()
    out[a] = mu[a] + (label[a] - mu[a]) / score[a]
    return weight * out


def cluster_totals(values: np.ndarray, codes: np.ndarray, n_groups: int) -> np.ndarray:
    """Per-group sums, accumulated in row order."""
    return np.bincount(codes, weights=values, minlength=n_groups).astype(np.float64)


def knn_predict(train_x: np.ndarray, train_y: np.ndarray, query_x: np.ndarray, k: int) -> np.ndarray:
    """Mean label of the k nearest training points (Euclidean).

    All training points tied with the k-th smallest distance are included.
    """
    train_x = np.ascontiguousarray(train_x, dtype=np.float64)
    query_x = np.ascontiguousarray(query_x, dtype=np.float64)
    train_y = np.ascontiguousarray(train_y, dtype=np.float64)
    n_train = train_x.shape[0]
    k = min(k, n_train)
    out = np.empty(query_x.shape[0], dtype=np.float64)
    for q in range(query_x.shape[0]):
        d2 = np.zeros(n_train, dtype=np.float64)
        for j in range(train_x.shape[1]):
            diff = train_x[:, j] - query_x[q, j]
            d2 += diff * diff
        kth = np.partition(d2, k - 1)[k - 1]
        sel = d2 <= kth
        # sequential sum in training order, matching the compiled loop
        total = 0.0
        for v in train_y[sel]:
            total += v
        out[q] = total / int(sel.sum())
    return out
