"""Empirical Wasserstein distances between sample clouds and grid measures."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import ValidationError

__all__ = ["as_cloud", "equalize_1d", "wp_1d", "wp_assignment", "wp_to_measure", "MAX_ASSIGNMENT"]

MAX_ASSIGNMENT = 1024
N_REF_RESAMPLES = 8


def as_cloud(points, dim=None) -> np.ndarray:
    """Validate a uniform-weight sample cloud; returns an (n, d) float array."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or len(pts) == 0:
        raise ValidationError("sample cloud must be a non-empty (n, d) array")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("sample cloud contains non-finite coordinates")
    if dim is not None and pts.shape[1] != dim:
        raise ValidationError(f"expected {dim}-dimensional samples, got {pts.shape[1]}")
    return pts


def _check_p(p):
    if p not in (1, 2):
        raise ValidationError("only p in {1, 2} is supported")


def equalize_1d(a, b):
    """Sorted 1D samples of equal size; the larger set is resampled at quantile midpoints.

    Returns ``(a_sorted, b_sorted, resampled)``.
    """
    a = np.sort(np.ravel(a))
    b = np.sort(np.ravel(b))
    if len(a) == len(b):
        return a, b, False
    n = min(len(a), len(b))
    levels = (np.arange(n) + 0.5) / n

    def shrink(x):
        return np.quantile(x, levels, method="inverted_cdf") if len(x) > n else x

    return shrink(a), shrink(b), True


def wp_1d(a, b, p: int = 1) -> float:
    """Exact W_p between equal-size 1D empirical measures via the sorted coupling."""
    _check_p(p)
    a = as_cloud(a, 1)
    b = as_cloud(b, 1)
    x, y, _ = equalize_1d(a, b)
    return float(np.mean(np.abs(x - y) ** p) ** (1.0 / p))


def wp_assignment(a, b, p: int = 1) -> float:
    """W_p between equal-size clouds in any dimension by optimal assignment."""
    _check_p(p)
    a = as_cloud(a)
    b = as_cloud(b, a.shape[1])
    if len(a) != len(b):
        raise ValidationError("assignment needs clouds of equal size")
    if len(a) > MAX_ASSIGNMENT:
        raise ValidationError(f"assignment limited to n <= {MAX_ASSIGNMENT}")
    cost = cdist(a, b) ** p
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean() ** (1.0 / p))


def wp_to_measure(cloud, m, p: int = 2, n_ref: int | None = None, rng=None, r: int = N_REF_RESAMPLES):
    """W_p between a cloud and a grid measure, averaged over ``r`` reference draws.

    Returns ``(mean, standard_error)``.
    """
    from .gibbs import sample_measure

    _check_p(p)
    cloud = as_cloud(cloud, m.dim)
    if rng is None:
        rng = np.random.default_rng(0)
    n_ref = len(cloud) if n_ref is None else int(n_ref)
    vals = []
    for _ in range(r):
        ref = sample_measure(m, n_ref, rng)
        if m.dim == 1:
            vals.append(wp_1d(cloud, ref, p))
        else:
            n = min(len(cloud), n_ref, MAX_ASSIGNMENT)
            sub = cloud if len(cloud) == n else cloud[rng.choice(len(cloud), n, replace=False)]
            vals.append(wp_assignment(sub, ref[:n], p))
    vals = np.asarray(vals)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(r))
