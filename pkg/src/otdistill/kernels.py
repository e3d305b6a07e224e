"""Gaussian RBF kernel and squared MMD with analytic gradients."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from otdistill.errors import InvalidInput


def rbf_kernel(X: np.ndarray, Y: np.ndarray, bandwidth: float) -> np.ndarray:
    if not bandwidth > 0:
        raise InvalidInput("RBF bandwidth must be positive", details={"bandwidth": bandwidth})
    return np.exp(-cdist(X, Y, "sqeuclidean") / (2.0 * bandwidth**2))


def median_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    """Median heuristic on the pooled pairwise distances; 1.0 if they all vanish."""
    pooled = np.vstack([X, Y])
    dists = cdist(pooled, pooled, "euclidean")
    upper = dists[np.triu_indices_from(dists, k=1)]
    positive = upper[upper > 0]
    if positive.size == 0:
        return 1.0
    return float(np.median(positive))


def mmd2(X: np.ndarray, Y: np.ndarray, bandwidth: float) -> float:
    """Biased (V-statistic) squared MMD between the empirical measures of X and Y."""
    return float(
        rbf_kernel(X, X, bandwidth).mean()
        - 2.0 * rbf_kernel(X, Y, bandwidth).mean()
        + rbf_kernel(Y, Y, bandwidth).mean()
    )


def mmd2_grad_x(X: np.ndarray, Y: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gradient of mmd2(X, Y) w.r.t. every row of X."""
    n = X.shape[0]
    m = Y.shape[0]
    k_xx = rbf_kernel(X, X, bandwidth)
    k_xy = rbf_kernel(X, Y, bandwidth)
    scale = 1.0 / bandwidth**2
    # d k(x, y) / dx = -k(x, y) (x - y) / bandwidth^2
    self_term = -(k_xx.sum(axis=1, keepdims=True) * X - k_xx @ X) * scale
    cross_term = -(k_xy.sum(axis=1, keepdims=True) * X - k_xy @ Y) * scale
    return (2.0 / n**2) * self_term - (2.0 / (n * m)) * cross_term
