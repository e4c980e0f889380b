"""Matrix-free curvature probes: differenced HVPs, Hutchinson trace, Lanczos."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import DivergenceError, ValidationError

__all__ = [
    "SpectrumReport",
    "hvp_fd",
    "hutchinson_trace",
    "lanczos_topk",
    "power_iteration",
    "spectrum",
]

HVP_REL_STEP = 1e-3
LANCZOS_TOL = 1e-4
LANCZOS_MAX_ITERS = 500
BREAKDOWN = 1e-14
MAX_RESTARTS = 3
MAX_K = 50


@dataclass
class SpectrumReport:
    top_eigenvalues: list
    trace_mean: float = math.nan
    trace_se: float = math.nan
    m_probes: int = 0
    k: int = 0
    converged: list = field(default_factory=list)
    iterations: int = 0

    def to_dict(self):
        return {
            "top_eigenvalues": [float(x) for x in self.top_eigenvalues],
            "converged": [bool(c) for c in self.converged],
            "k": self.k,
            "trace_mean": self.trace_mean,
            "trace_se": self.trace_se,
            "m_probes": self.m_probes,
            "iterations": self.iterations,
        }


def hvp_fd(grad, theta, v) -> np.ndarray:
    """Central difference of ``grad`` along v/|v|, rescaled by |v|."""
    theta = np.asarray(theta, dtype=float)
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm == 0:
        raise ValidationError("hvp_fd needs a non-zero direction")
    h = HVP_REL_STEP * (1.0 + float(np.linalg.norm(theta)))
    vhat = v / norm
    return (np.asarray(grad(theta + h * vhat)) - np.asarray(grad(theta - h * vhat))) / (2 * h) * norm


def hutchinson_trace(hvp, dim: int, m: int, rng):
    """Rademacher estimate of tr H; returns ``(mean, standard_error)``."""
    if m < 2:
        raise ValidationError("Hutchinson needs m >= 2 probes")
    vals = np.empty(m)
    for i in range(m):
        z = rng.integers(0, 2, size=dim) * 2.0 - 1.0
        hz = np.asarray(hvp(z), dtype=float)
        if not np.all(np.isfinite(hz)):
            raise DivergenceError(f"non-finite HVP at probe {i}")
        vals[i] = z @ hz
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(m))


def lanczos_topk(hvp, dim: int, k: int, rng, max_iters: int = LANCZOS_MAX_ITERS, tol: float = LANCZOS_TOL) -> SpectrumReport:
    """Top-k eigenvalues of a symmetric operator by Lanczos with full reorthogonalisation.

    A Ritz value counts as converged once its residual |b_m s_{m,i}| drops to
    ``tol * |theta_i|``. On breakdown before convergence a fresh Gaussian
    probe orthogonal to the basis continues the recursion (at most three
    times).
    """
    if not 1 <= k <= min(dim, MAX_K):
        raise ValidationError(f"k must lie in [1, min(dim, {MAX_K})]")
    max_iters = min(max_iters, dim)
    V = np.zeros((max_iters + 1, dim))
    alpha = np.zeros(max_iters)
    beta = np.zeros(max_iters)
    q = rng.standard_normal(dim)
    V[0] = q / np.linalg.norm(q)
    restarts = 0
    ritz = np.array([])
    conv = np.array([], dtype=bool)
    m = 0
    for j in range(max_iters):
        w = np.asarray(hvp(V[j]), dtype=float)
        if not np.all(np.isfinite(w)):
            raise DivergenceError(f"non-finite HVP at Lanczos iteration {j}")
        alpha[j] = V[j] @ w
        w = w - alpha[j] * V[j] - (beta[j - 1] * V[j - 1] if j else 0.0)
        # full reorthogonalisation, twice for stability
        for _ in range(2):
            w -= V[: j + 1].T @ (V[: j + 1] @ w)
        b = float(np.linalg.norm(w))
        m = j + 1
        if m >= k:
            ritz, conv = _ritz(alpha[:m], beta[: m - 1], b, k, tol)
            if conv.all():
                break
        if m == max_iters:
            break
        if b < BREAKDOWN:
            if restarts == MAX_RESTARTS:
                break
            restarts += 1
            q = rng.standard_normal(dim)
            for _ in range(2):
                q -= V[:m].T @ (V[:m] @ q)
            beta[j] = 0.0
            V[j + 1] = q / np.linalg.norm(q)
        else:
            beta[j] = b
            V[j + 1] = w / b
    if m < k:
        ritz, conv = _ritz(alpha[:m], beta[: m - 1], 0.0, min(k, m), tol)
    return SpectrumReport(list(ritz), k=k, converged=list(conv), iterations=m)


def _ritz(alpha, offdiag, b_last, k, tol):
    if len(alpha) == 1:
        vals, vecs = alpha.copy(), np.ones((1, 1))
    else:
        vals, vecs = eigh_tridiagonal(alpha, offdiag)
    order = np.argsort(vals)[::-1][:k]
    resid = np.abs(b_last * vecs[-1, order])
    top = vals[order]
    return top, resid <= tol * np.maximum(np.abs(top), 1e-300)


def power_iteration(hvp, dim: int, rng, iters: int = 10_000, tol: float = 1e-12) -> float:
    """Dominant eigenvalue (largest magnitude) by plain power iteration."""
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = np.asarray(hvp(v), dtype=float)
        new = float(v @ w)
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
        if abs(new - lam) <= tol * max(abs(new), 1.0):
            return new
        lam = new
    return lam


def spectrum(hvp, dim: int, k: int = 10, m: int = 1000, rng=None, max_iters=LANCZOS_MAX_ITERS, tol=LANCZOS_TOL) -> SpectrumReport:
    """Lanczos top-k plus a Hutchinson trace in one report."""
    if rng is None:
        rng = np.random.default_rng(0)
    rep = lanczos_topk(hvp, dim, min(k, dim, MAX_K), rng, max_iters, tol)
    rep.trace_mean, rep.trace_se = hutchinson_trace(hvp, dim, m, rng)
    rep.m_probes = m
    return rep
