"""Data-size weighted parameter averaging."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes.sum()
    if sizes.size == 0 or total <= 0:
        raise ValueError("aggregation weights need positive total data size")
    return sizes / total


def weighted_average(vectors: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    """Data-size weighted mean, evaluated as ``v0 + sum_i w_i (v_i - v0)``.

    Normalises over the participating clients only. The offset form returns
    identical inputs bit for bit and is the identity for a single client.
    """
    if len(vectors) == 0:
        raise ValueError("nothing to aggregate")
    if len(vectors) != len(sizes):
        raise ValueError("one size per vector required")
    w = weights(sizes)
    base = np.asarray(vectors[0], dtype=np.float64)
    for v in vectors[1:]:
        if np.shape(v) != base.shape:
            raise ValueError(f"layout mismatch: {np.shape(v)} vs {base.shape}")
    out = base.copy()
    for v, wi in zip(vectors[1:], w[1:]):
        out += wi * (np.asarray(v, dtype=np.float64) - base)
    return out
