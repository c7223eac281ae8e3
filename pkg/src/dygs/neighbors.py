"""Exact k-nearest-neighbor queries (self-excluding) on point sets."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def knn_indices(points, k):
    """Indices (N, k) of the k nearest neighbors of each point, never itself.

    Exact k-d tree query; coincident points are handled by filtering the
    query point's own row id rather than trusting distance ordering.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    _, idx = cKDTree(points).query(points, k=k + 1)
    idx = idx.reshape(n, k + 1)
    not_self = idx != np.arange(n)[:, None]
    rank = np.cumsum(not_self, axis=1)
    sel = not_self & (rank <= k)
    return idx[sel].reshape(n, k)
