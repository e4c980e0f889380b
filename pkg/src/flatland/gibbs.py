"""Quadrature-normalised Gibbs measures on regular 1D/2D grids."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import QuadratureGuardError, ValidationError
from .objective import Objective
from .smoothing import smoothed_values_crn

__all__ = [
    "GridSpec",
    "GridMeasure",
    "build_gibbs",
    "energy_on_grid",
    "kl",
    "w2_grid",
    "w1_grid",
    "coupling_sweep",
    "mass_in_region",
    "sample_measure",
    "grid_argmin",
]

BOUNDARY_MASS_TOL = 1e-8
MAX_EXPANSIONS = 3
MIN_RESOLUTION = 256


@dataclass(frozen=True)
class GridSpec:
    """Box [lo, hi] with ``n`` nodes per axis."""

    lo: tuple
    hi: tuple
    n: int

    def __post_init__(self):
        lo = tuple(float(x) for x in np.ravel(self.lo))
        hi = tuple(float(x) for x in np.ravel(self.hi))
        if len(lo) != len(hi) or not 1 <= len(lo) <= 2:
            raise ValidationError("grid must be 1D or 2D with matching bounds")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValidationError("grid upper bounds must exceed lower bounds")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", int(self.n))

    @classmethod
    def box(cls, lo, hi, n, dim=1):
        return cls(tuple(np.broadcast_to(lo, (dim,))), tuple(np.broadcast_to(hi, (dim,))), n)

    @property
    def dim(self):
        return len(self.lo)

    @property
    def axes(self):
        return [np.linspace(l, h, self.n) for l, h in zip(self.lo, self.hi)]

    @property
    def spacing(self):
        return tuple((h - l) / (self.n - 1) for l, h in zip(self.lo, self.hi))

    def points(self):
        """Node coordinates, shape (n,) + ... + (d,)."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def trapezoid_weights(self):
        ws = []
        for h in self.spacing:
            w = np.full(self.n, h)
            w[0] = w[-1] = h / 2
            ws.append(w)
        return ws[0] if self.dim == 1 else np.outer(ws[0], ws[1])

    def expanded(self, factor=2.0):
        c = [(l + h) / 2 for l, h in zip(self.lo, self.hi)]
        r = [(h - l) / 2 * factor for l, h in zip(self.lo, self.hi)]
        return GridSpec(tuple(ci - ri for ci, ri in zip(c, r)), tuple(ci + ri for ci, ri in zip(c, r)), self.n)

    def to_dict(self):
        return {"lo": list(self.lo), "hi": list(self.hi), "n": self.n}


@dataclass(frozen=True)
class GridMeasure:
    grid: GridSpec
    log_density_unnorm: np.ndarray = field(repr=False)
    log_Z: float
    beta: float
    energy_kind: str
    sigma: float = 0.0
    n_mc: int | None = None

    @property
    def dim(self):
        return self.grid.dim

    @property
    def log_density(self):
        return self.log_density_unnorm - self.log_Z

    @property
    def density(self):
        return np.exp(self.log_density)

    def _integrate(self, f):
        return float(np.sum(self.grid.trapezoid_weights() * self.density * f))

    def total_mass(self):
        return self._integrate(1.0)

    def mean(self):
        pts = self.grid.points()
        return np.array([self._integrate(pts[..., i]) for i in range(self.dim)])

    def cov(self):
        pts = self.grid.points()
        mu = self.mean()
        c = np.empty((self.dim, self.dim))
        for i in range(self.dim):
            for j in range(self.dim):
                c[i, j] = self._integrate((pts[..., i] - mu[i]) * (pts[..., j] - mu[j]))
        return c

    def var(self):
        return np.diag(self.cov())

    def mode(self):
        idx = np.unravel_index(int(np.argmax(self.log_density_unnorm)), self.log_density_unnorm.shape)
        return self.grid.points()[idx]

    def marginal(self, axis=0):
        """Marginal node densities along one axis (trapezoid over the other)."""
        p = self.density
        if self.dim == 1:
            return p
        h = self.grid.spacing[1 - axis]
        w = np.full(self.grid.n, h)
        w[0] = w[-1] = h / 2
        return p @ w if axis == 0 else w @ p

    def cdf(self):
        """1D CDF at nodes (cumulative trapezoid)."""
        if self.dim != 1:
            raise ValidationError("cdf is defined for 1D measures")
        return _cumtrapz(self.density, self.grid.spacing[0])

    def quantile(self, q):
        if self.dim != 1:
            raise ValidationError("quantile is defined for 1D measures")
        return _quantile(self.grid.axes[0], self.cdf(), np.asarray(q, dtype=float))

    def to_dict(self):
        out = {
            "grid": self.grid.to_dict(),
            "beta": self.beta,
            "energy_kind": self.energy_kind,
            "sigma": self.sigma,
            "n_mc": self.n_mc,
            "log_Z": self.log_Z,
            "log_density": np.round(self.log_density, 12).tolist(),
        }
        return out

    @classmethod
    def from_dict(cls, data):
        grid = GridSpec(tuple(data["grid"]["lo"]), tuple(data["grid"]["hi"]), data["grid"]["n"])
        logd = np.asarray(data["log_density"], dtype=float)
        lz = float(logsumexp(logd + np.log(grid.trapezoid_weights())))
        return cls(grid, logd, lz, data["beta"], data["energy_kind"], data.get("sigma", 0.0), data.get("n_mc"))


def _cumtrapz(p, h):
    c = np.concatenate([[0.0], np.cumsum(0.5 * h * (p[1:] + p[:-1]))])
    return c / c[-1]


def _quantile(x, cdf, q):
    # piecewise-uniform within cells: linear interpolation of the node CDF
    return np.interp(q, cdf, x)


def energy_on_grid(obj: Objective, energy_kind: str, points, sigma=0.0, eps=None):
    """Energy values at grid nodes for kind u, v or g_eps."""
    if energy_kind == "u":
        return obj.value(points)
    if energy_kind == "v":
        return obj.value(points) + 0.5 * sigma**2 * obj.trace_hessian(points)
    if energy_kind == "g_eps":
        if eps is None:
            raise ValidationError("g_eps energies need perturbation draws")
        return smoothed_values_crn(obj, points, eps)
    raise ValidationError(f"unknown energy kind {energy_kind!r}")


def _boundary_mass(logp, grid):
    """Mass of the outermost cell layer along every axis."""
    w = grid.trapezoid_weights()
    p = np.exp(logp) * w
    if grid.dim == 1:
        return float(p[:2].sum() + p[-2:].sum())
    mask = np.zeros_like(p, dtype=bool)
    mask[:2, :] = mask[-2:, :] = True
    mask[:, :2] = mask[:, -2:] = True
    return float(p[mask].sum())


def _measure_from_energy(energy, grid, beta, kind, sigma, n_mc):
    logu = -beta * energy
    if not np.all(np.isfinite(logu)):
        raise QuadratureGuardError("non-finite energy on grid")
    logu = logu - logu.max()
    log_w = np.log(grid.trapezoid_weights())
    log_Z = float(logsumexp(logu + log_w))
    logp = logu - log_Z
    if np.count_nonzero(logp + log_w > math.log(1e-300)) < 3:
        raise QuadratureGuardError("resolution insufficient: fewer than 3 cells carry mass")
    # restore the energy offset so log_Z is the true log normaliser of exp(-beta E)
    shift = float(-beta * energy.min()) if np.all(np.isfinite(energy)) else 0.0
    return GridMeasure(grid, logu + shift, log_Z + shift, float(beta), kind, float(sigma), n_mc), logp


def build_gibbs(obj: Objective, energy_kind: str, beta: float, grid: GridSpec, sigma: float = 0.0,
                n_mc: int | None = None, rng=None, eps=None, expand: bool = True) -> GridMeasure:
    """Gibbs measure exp(-beta * E) / Z on a grid via log-sum-exp trapezoid.

    ``energy_kind`` is ``"u"``, ``"v"`` or ``"g_eps"``. For ``g_eps`` one set of
    ``n_mc`` perturbation draws is shared by every node (common random
    numbers); pass ``eps`` to reuse draws across measures. If the boundary
    guard trips the box is doubled about its centre, at most three times.
    """
    if obj.dim > 2 or obj.dim != grid.dim:
        raise ValidationError("Gibbs grids need dim <= 2 matching the objective")
    if not beta > 0:
        raise ValidationError("beta must be positive")
    if grid.n < MIN_RESOLUTION:
        raise ValidationError(f"grid resolution must be >= {MIN_RESOLUTION} per axis")
    if energy_kind == "g_eps" and eps is None:
        if n_mc is None or rng is None:
            raise ValidationError("g_eps energies need n_mc and rng (or eps)")
        eps = sigma * rng.standard_normal((int(n_mc), obj.dim))
    if eps is not None:
        n_mc = len(eps)
    for attempt in range(MAX_EXPANSIONS + 1):
        energy = energy_on_grid(obj, energy_kind, grid.points(), sigma, eps)
        m, logp = _measure_from_energy(energy, grid, beta, energy_kind, sigma, n_mc if energy_kind == "g_eps" else None)
        if _boundary_mass(logp, grid) <= BOUNDARY_MASS_TOL:
            return m
        if not expand or attempt == MAX_EXPANSIONS:
            break
        grid = grid.expanded()
    raise QuadratureGuardError("domain too small: boundary cells carry more than 1e-8 mass")


def _check_same_grid(p, q):
    if p.grid != q.grid:
        raise ValidationError("measures live on different grids")


def kl(p: GridMeasure, q: GridMeasure) -> float:
    """Trapezoid KL(p || q), clamped at 0 for round-off below -1e-12."""
    _check_same_grid(p, q)
    lp, lq = p.log_density, q.log_density
    dens = np.exp(lp)
    integrand = np.where(dens > 0, dens * (lp - lq), 0.0)
    val = float(np.sum(p.grid.trapezoid_weights() * integrand))
    if val < -1e-12:
        warnings.warn(f"KL quadrature gave {val:g}; measures may be under-resolved")
    return max(val, 0.0)


def w1_grid(p: GridMeasure, q: GridMeasure) -> float:
    """Exact 1D W1 between the grid CDFs: integral of |F - G|."""
    _check_same_grid(p, q)
    if p.dim != 1:
        raise ValidationError("w1_grid is 1D only")
    diff = np.abs(p.cdf() - q.cdf())
    return float(np.sum(p.grid.trapezoid_weights() * diff))


def w2_grid(p: GridMeasure, q: GridMeasure, n_levels: int = 200_000) -> float:
    """1D W2 through the inverse-CDF coupling on a midpoint level grid."""
    _check_same_grid(p, q)
    if p.dim != 1:
        raise ValidationError("w2_grid is 1D only; use sample-based assignment in 2D")
    t = (np.arange(n_levels) + 0.5) / n_levels
    d = p.quantile(t) - q.quantile(t)
    return float(math.sqrt(np.mean(d * d)))


def _hat_weights(x, a, b):
    """Integral over [a, b] of each node's piecewise-linear hat function."""
    w = np.zeros_like(x)
    a, b = max(a, x[0]), min(b, x[-1])
    if b <= a:
        return w
    xl, xr = x[:-1], x[1:]
    h = xr - xl
    lft = np.clip(a, xl, xr)
    rgt = np.clip(b, xl, xr)
    w[:-1] += ((xr - lft) ** 2 - (xr - rgt) ** 2) / (2 * h)
    w[1:] += ((rgt - xl) ** 2 - (lft - xl) ** 2) / (2 * h)
    return w


def mass_in_region(m: GridMeasure, region) -> float:
    """Mass of the piecewise-(bi)linear density over an interval or box.

    ``region`` is ``(lo, hi)``; scalars for 1D, length-2 sequences for 2D.
    Infinite bounds are allowed.
    """
    lo = np.broadcast_to(np.asarray(region[0], dtype=float), (m.dim,))
    hi = np.broadcast_to(np.asarray(region[1], dtype=float), (m.dim,))
    ws = [_hat_weights(ax, lo[i], hi[i]) for i, ax in enumerate(m.grid.axes)]
    if any(not w.any() for w in ws):
        warnings.warn("region does not intersect the grid; mass is 0")
        return 0.0
    p = m.density
    val = float(ws[0] @ p) if m.dim == 1 else float(ws[0] @ p @ ws[1])
    return min(max(val, 0.0), 1.0)


def _sample_cells(rng, probs, n):
    c = np.cumsum(probs)
    return np.minimum(np.searchsorted(c / c[-1], rng.random(n), side="right"), len(probs) - 1)


def _jitter(x, idx, h, rng):
    # uniform over the node's own cell, clipped at the box edges
    lo = np.maximum(x[idx] - h / 2, x[0])
    hi = np.minimum(x[idx] + h / 2, x[-1])
    return lo + (hi - lo) * rng.random(len(idx))


def sample_measure(m: GridMeasure, n: int, rng) -> np.ndarray:
    """i.i.d. draws from node-centred cells carrying the trapezoid node masses.

    In 2D the first axis is drawn from its marginal and the second from the
    conditional row. Returns an ``(n, d)`` array.
    """
    mass = m.density * m.grid.trapezoid_weights()
    if m.dim == 1:
        x = m.grid.axes[0]
        idx = _sample_cells(rng, mass, n)
        return _jitter(x, idx, m.grid.spacing[0], rng)[:, None]
    x, y = m.grid.axes
    hx, hy = m.grid.spacing
    ix = _sample_cells(rng, mass.sum(axis=1), n)
    iy = np.empty(n, dtype=int)
    u = rng.random(n)
    for i in np.unique(ix):
        sel = ix == i
        c = np.cumsum(mass[i])
        iy[sel] = np.minimum(np.searchsorted(c / c[-1], u[sel], side="right"), len(c) - 1)
    return np.column_stack([_jitter(x, ix, hx, rng), _jitter(y, iy, hy, rng)])


def grid_argmin(obj: Objective, energy_kind: str, grid: GridSpec, sigma: float = 0.0, refine: bool = True):
    """Grid arg-min of u or v, optionally polished by a bounded local solve.

    Returns ``(theta, value)``.
    """
    from scipy.optimize import minimize

    pts = grid.points()
    energy = energy_on_grid(obj, energy_kind, pts, sigma)
    idx = np.unravel_index(int(np.argmin(energy)), energy.shape)
    theta0 = pts[idx].astype(float)
    best = (theta0, float(energy[idx]))
    if not refine:
        return best
    h = np.asarray(grid.spacing)
    bounds = [(t - hi, t + hi) for t, hi in zip(theta0, h)]

    def f(t):
        return float(energy_on_grid(obj, energy_kind, np.asarray(t)[None, :], sigma)[0])

    res = minimize(f, theta0, method="L-BFGS-B", bounds=bounds, options={"ftol": 1e-15, "gtol": 1e-12})
    if res.fun < best[1]:
        best = (np.asarray(res.x), float(res.fun))
    return best


@dataclass
class SweepRow:
    beta: float
    sigma: float
    kl: float
    w2: float
    kl_err: float
    valid: bool
    error: str = ""

    def as_dict(self):
        return {"beta": self.beta, "sigma": self.sigma, "kl": self.kl, "w2": self.w2, "kl_err": self.kl_err, "valid": self.valid}


def _w2_2d(p, q, rng, n=512):
    from .transport import wp_assignment

    return wp_assignment(sample_measure(p, n, rng), sample_measure(q, n, rng), 2)


def coupling_sweep(obj: Objective, betas: Sequence[float], eta: float, grid: GridSpec, n_mc: int,
                   seed: int = 0, n_batches: int = 4) -> list[SweepRow]:
    """KL and W2 between exp(-beta g_eps) and exp(-beta v) along sigma = beta^(-(1+eta)/4).

    Perturbations are drawn as +/- pairs. ``kl_err`` is the spread of KL over
    ``n_batches`` disjoint paired batches divided by sqrt(n_batches). A failing row is marked
    invalid and the sweep carries on.
    """
    from .kernels import sigma_from_beta

    betas = [float(b) for b in betas]
    if len(betas) < 3 or any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
        raise ValidationError("coupling sweep needs >= 3 ascending betas")
    if betas[0] <= 1:
        raise ValidationError("coupled betas must exceed 1")
    rows = []
    for i, beta in enumerate(betas):
        sigma = sigma_from_beta(beta, eta)
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(i,)))
        try:
            # mirrored draws cancel odd moments, so quadratics give a constant g - v
            half = sigma * rng.standard_normal((n_batches, max(1, int(n_mc) // (2 * n_batches)), obj.dim))
            batches = [np.concatenate([b, -b]) for b in half]
            eps = np.concatenate(batches)
            target = build_gibbs(obj, "v", beta, grid, sigma=sigma)
            smoothed = build_gibbs(obj, "g_eps", beta, target.grid, sigma=sigma, eps=eps, expand=False)
            k = kl(smoothed, target)
            batch_kls = [
                kl(build_gibbs(obj, "g_eps", beta, target.grid, sigma=sigma, eps=chunk, expand=False), target)
                for chunk in batches
            ]
            kl_err = float(np.std(batch_kls, ddof=1) / math.sqrt(n_batches))
            w2 = w2_grid(smoothed, target) if obj.dim == 1 else _w2_2d(smoothed, target, rng)
            rows.append(SweepRow(beta, sigma, k, w2, kl_err, True))
        except (QuadratureGuardError, ValidationError, FloatingPointError) as exc:
            rows.append(SweepRow(beta, sigma, math.nan, math.nan, math.nan, False, str(exc)))
    return rows
