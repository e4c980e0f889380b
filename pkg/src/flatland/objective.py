"""Differentiable test objectives and stochastic-gradient models.

Every callable on an :class:`Objective` is vectorised over leading axes: a
point set of shape ``(..., d)`` maps to values of shape ``(...)`` and
gradients of shape ``(..., d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.polynomial import Polynomial

from .errors import ValidationError

__all__ = [
    "Objective",
    "StochasticGradientModel",
    "DissipativityEstimate",
    "make_quadratic",
    "make_polynomial",
    "make_quartic",
    "make_double_well",
    "make_double_well_2d",
    "make_finite_sum",
    "make_additive_noise",
    "exact_model",
    "from_value_and_gradient",
    "parse_objective",
    "estimate_dissipativity",
    "estimate_gradient_lipschitz",
    "fd_gradient",
]

GRAD_FD_REL_STEP = 1e-4
HVP_FD_REL_STEP = 1e-3


def _points(theta, dim):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 0:
        theta = theta[None]
    if theta.shape[-1] != dim:
        raise ValidationError(f"expected trailing dimension {dim}, got shape {theta.shape}")
    return theta


@dataclass(frozen=True)
class Objective:
    """A four-times differentiable scalar field with curvature access.

    ``fourth_contraction`` returns ``sum_{ijkl} d4u * (d_ij d_kl + d_ik d_jl + d_il d_jk)``,
    which equals ``3 * sum_{ij} d4u / d_i^2 d_j^2``.
    """

    dim: int
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hvp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    trace_hessian: Callable[[np.ndarray], np.ndarray]
    fourth_contraction: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "objective"
    smoothness_order: int = 4
    # per-axis polynomials when u(theta) = sum_i p_i(theta_i); enables exact
    # common-random-number smoothing on grids
    axis_polys: tuple[Polynomial, ...] | None = field(default=None, repr=False)

    def __call__(self, theta):
        return self.value(theta)

    def hessian(self, theta) -> np.ndarray:
        """Dense Hessian at a single point, assembled from HVPs."""
        theta = _points(theta, self.dim)
        eye = np.eye(self.dim)
        cols = [np.asarray(self.hvp(theta, eye[i]), dtype=float).reshape(self.dim) for i in range(self.dim)]
        return np.column_stack(cols)


# ---------------------------------------------------------------------------
# finite-difference fallbacks


def fd_gradient(value, theta) -> np.ndarray:
    """Central-difference gradient of a scalar function at one point."""
    theta = np.asarray(theta, dtype=float)
    h = GRAD_FD_REL_STEP * (1.0 + np.linalg.norm(theta))
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e.flat[i] = h
        out.flat[i] = (float(value(theta + e)) - float(value(theta - e))) / (2 * h)
    return out


def _fd_hvp(gradient):
    def hvp(theta, v):
        theta = np.asarray(theta, dtype=float)
        v = np.asarray(v, dtype=float)
        norm = np.linalg.norm(v)
        if norm == 0:
            return np.zeros_like(theta + v)
        h = HVP_FD_REL_STEP * (1.0 + np.linalg.norm(theta))
        vhat = v / norm
        return (gradient(theta + h * vhat) - gradient(theta - h * vhat)) / (2 * h) * norm

    return hvp


def _trace_from_hvp(hvp, dim):
    def trace(theta):
        theta = np.asarray(theta, dtype=float)
        eye = np.eye(dim)
        return sum(np.asarray(hvp(theta, eye[i]))[..., i] for i in range(dim))

    return trace


def _fd_fourth(trace_hessian, dim):
    # sum_ij d_i^2 d_j^2 u is the Laplacian of tr H
    def fourth(theta):
        theta = np.asarray(theta, dtype=float)
        h = HVP_FD_REL_STEP * 10 * (1.0 + np.linalg.norm(theta))
        centre = trace_hessian(theta)
        lap = 0.0
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = h
            lap = lap + (trace_hessian(theta + e) - 2 * centre + trace_hessian(theta - e)) / h**2
        return 3.0 * lap

    return fourth


def from_value_and_gradient(value, gradient=None, *, dim: int, name: str = "custom") -> Objective:
    """Wrap user callables, filling curvature access by central differences."""
    if gradient is None:

        def gradient(theta):
            theta = np.asarray(theta, dtype=float)
            flat = theta.reshape(-1, dim)
            return np.stack([fd_gradient(value, t) for t in flat]).reshape(theta.shape)

    hvp = _fd_hvp(gradient)
    trace = _trace_from_hvp(hvp, dim)
    fourth = _fd_fourth(trace, dim) if dim <= 2 else None
    return Objective(dim, value, gradient, hvp, trace, fourth, name=name, smoothness_order=0)


# ---------------------------------------------------------------------------
# builtins


def make_quadratic(A) -> Objective:
    """u(theta) = 0.5 * theta^T A theta for symmetric positive-definite A."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValidationError(f"quadratic coefficients must be square, got {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValidationError("quadratic coefficients must be symmetric")
    eig = np.linalg.eigvalsh(A)
    if eig.min() <= 0:
        raise ValidationError(f"quadratic coefficients must be positive definite (min eigenvalue {eig.min():g})")
    A = A.copy()
    A.setflags(write=False)
    d = A.shape[0]
    tr = float(np.trace(A))

    def value(theta):
        theta = _points(theta, d)
        return 0.5 * np.einsum("...i,ij,...j->...", theta, A, theta)

    def gradient(theta):
        return _points(theta, d) @ A

    def hvp(theta, v):
        return np.broadcast_to(np.asarray(v, dtype=float) @ A, np.broadcast_shapes(np.shape(theta), np.shape(v))).copy()

    def trace(theta):
        return np.full(_points(theta, d).shape[:-1], tr)

    def fourth(theta):
        return np.zeros(_points(theta, d).shape[:-1])

    polys = None
    if np.count_nonzero(A - np.diag(np.diag(A))) == 0:
        polys = tuple(Polynomial([0.0, 0.0, 0.5 * a]) for a in np.diag(A))
    label = ",".join(f"{a:g}" for a in np.diag(A)) if polys else "dense"
    return Objective(d, value, gradient, hvp, trace, fourth, name=f"quadratic:{label}", smoothness_order=10**6, axis_polys=polys)


def make_polynomial(polys: Sequence, name: str | None = None) -> Objective:
    """Separable polynomial u(theta) = sum_i p_i(theta_i).

    ``polys`` holds one coefficient list (lowest degree first) or
    :class:`numpy.polynomial.Polynomial` per axis.
    """
    polys = tuple(p if isinstance(p, Polynomial) else Polynomial(np.asarray(p, dtype=float)) for p in polys)
    if not polys:
        raise ValidationError("need at least one axis polynomial")
    d = len(polys)
    derivs = [[p.deriv(k) if k else p for k in range(5)] for p in polys]
    coefs = [[np.asarray(q.coef[::-1]) for q in row] for row in derivs]

    def _axis(theta, order):
        theta = _points(theta, d)
        return np.stack([np.polyval(coefs[i][order], theta[..., i]) for i in range(d)], axis=-1)

    def value(theta):
        return _axis(theta, 0).sum(axis=-1)

    def gradient(theta):
        return _axis(theta, 1)

    def hvp(theta, v):
        return _axis(theta, 2) * np.asarray(v, dtype=float)

    def trace(theta):
        return _axis(theta, 2).sum(axis=-1)

    def fourth(theta):
        return 3.0 * _axis(theta, 4).sum(axis=-1)

    if name is None:
        name = "poly:" + ";".join(",".join(f"{c:g}" for c in p.coef) for p in polys)
    return Objective(d, value, gradient, hvp, trace, fourth, name=name, smoothness_order=10**6, axis_polys=polys)


def make_quartic(dim: int = 1) -> Objective:
    """u(theta) = sum_i theta_i^4."""
    return make_polynomial([[0, 0, 0, 0, 1.0]] * dim, name="quartic" if dim == 1 else f"quartic:{dim}")


def _double_well_poly(gamma, c):
    if not 0 < gamma < 0.5:
        raise ValidationError(f"double-well tilt gamma must lie in (0, 0.5), got {gamma}")
    if not 0 < c < 0.2:
        raise ValidationError(f"double-well confinement c must lie in (0, 0.2), got {c}")
    # (x^2 - 1)^2 (1 + gamma x) + c x^6
    return Polynomial([1.0, gamma, -2.0, -2.0 * gamma, 1.0, gamma, c])


def make_double_well(gamma: float = 0.3, c: float = 0.05) -> Objective:
    """Tilted 1D double well with a sharp right and a flat left minimum."""
    return make_polynomial([_double_well_poly(gamma, c)], name=f"doublewell:{gamma:g},{c:g}")


def make_double_well_2d(gamma: float = 0.3, c: float = 0.05) -> Objective:
    """Separable sum of two independent double wells."""
    p = _double_well_poly(gamma, c)
    return make_polynomial([p, p], name=f"doublewell2d:{gamma:g},{c:g}")


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def parse_objective(spec: str) -> Objective:
    """Resolve a string identifier such as ``doublewell:0.3,0.05``."""
    kind, _, args = spec.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "quadratic":
            if ";" in args:
                return make_quadratic([_floats(row) for row in args.split(";")])
            return make_quadratic(np.diag(_floats(args)))
        if kind == "doublewell":
            return make_double_well(*_floats(args)) if args else make_double_well()
        if kind == "doublewell2d":
            return make_double_well_2d(*_floats(args)) if args else make_double_well_2d()
        if kind == "quartic":
            return make_quartic(int(args) if args else 1)
        if kind == "poly":
            return make_polynomial([_floats(row) for row in args.split(";")])
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"cannot parse objective id {spec!r}: {exc}") from None
    raise ValidationError(f"unknown objective id {spec!r}")


# ---------------------------------------------------------------------------
# stochastic gradients


class StochasticGradientModel:
    """Unbiased gradient oracle ``grad(theta, X)`` with ``E_X grad = base.gradient``.

    ``sample(rng)`` draws one data token X; ``stream(rng)`` yields one token per
    step. Kernels that need two gradients at the same data (SAM) call ``grad``
    twice with the same token.
    """

    mode = "exact"

    def __init__(self, base: Objective):
        self.base = base

    @property
    def dim(self):
        return self.base.dim

    def sample(self, rng):
        return None

    def sample_many(self, rng, n):
        return None

    def stream(self, rng) -> Iterator:
        while True:
            yield self.sample(rng)

    def grad(self, theta, X):
        return self.base.gradient(theta)

    def draw(self, theta, rng):
        return self.grad(theta, self.sample(rng))


def exact_model(obj: Objective) -> StochasticGradientModel:
    return StochasticGradientModel(obj)


class AdditiveNoiseModel(StochasticGradientModel):
    mode = "additive"

    def __init__(self, base, tau):
        if tau < 0:
            raise ValidationError("noise scale must be non-negative")
        super().__init__(base)
        self.tau = float(tau)

    def sample(self, rng):
        return rng.standard_normal(self.dim)

    def sample_many(self, rng, n):
        return rng.standard_normal((n, self.dim))

    def grad(self, theta, X):
        return self.base.gradient(theta) + self.tau * X


def make_additive_noise(obj: Objective, tau: float) -> StochasticGradientModel:
    """Gradient plus isotropic Gaussian noise with covariance tau^2 I."""
    return AdditiveNoiseModel(obj, tau)


def _mean_objective(components):
    n = len(components)
    d = components[0].dim

    def value(theta):
        return sum(c.value(theta) for c in components) / n

    def gradient(theta):
        return sum(c.gradient(theta) for c in components) / n

    def hvp(theta, v):
        return sum(c.hvp(theta, v) for c in components) / n

    def trace(theta):
        return sum(c.trace_hessian(theta) for c in components) / n

    fourth = None
    if all(c.fourth_contraction is not None for c in components):

        def fourth(theta):
            return sum(c.fourth_contraction(theta) for c in components) / n

    return Objective(
        d, value, gradient, hvp, trace, fourth,
        name=f"finitesum[{n}]",
        smoothness_order=min(c.smoothness_order for c in components),
    )


class FiniteSumModel(StochasticGradientModel):
    mode = "finite-sum"

    def __init__(self, components, batch_size):
        if not components:
            raise ValidationError("finite sum needs at least one component")
        d = components[0].dim
        if any(c.dim != d for c in components):
            raise ValidationError("all finite-sum components must share one dimension")
        if not 1 <= batch_size <= len(components):
            raise ValidationError(f"batch size must lie in [1, {len(components)}], got {batch_size}")
        super().__init__(_mean_objective(components))
        self.components = tuple(components)
        self.batch_size = int(batch_size)

    def sample(self, rng):
        return rng.choice(len(self.components), size=self.batch_size, replace=False)

    def grad(self, theta, X):
        if X is None:
            return self.base.gradient(theta)
        return sum(self.components[i].gradient(theta) for i in X) / len(X)


def make_finite_sum(components: Sequence[Objective], batch_size: int = 1) -> StochasticGradientModel:
    """u = mean of components; each draw averages a minibatch without replacement."""
    return FiniteSumModel(list(components), batch_size)


# ---------------------------------------------------------------------------
# dissipativity


@dataclass(frozen=True)
class DissipativityEstimate:
    a_hat: float
    b_hat: float
    ball_radius: float
    grid_spec: tuple
    minimizers: np.ndarray


_A_LADDER = tuple(2.0**k for k in range(-10, 3))
_B_FLOOR = 1e-9
_B_CAP = 1e6


def _scan_grid(domain, resolution, dim):
    lo, hi = (np.broadcast_to(np.asarray(x, dtype=float), (dim,)) for x in domain)
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(dim)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return axes, mesh


def _grid_minimizers(values, mesh):
    """Strict local minima of a sampled field, interior points only."""
    dim = values.ndim
    core = tuple(slice(1, -1) for _ in range(dim))
    is_min = np.ones(values[core].shape, dtype=bool)
    for ax in range(dim):
        for shift in (-1, 1):
            sl = [slice(1, -1)] * dim
            sl[ax] = slice(1 + shift, values.shape[ax] - 1 + shift)
            is_min &= values[core] < values[tuple(sl)]
    return mesh[core][is_min]


def estimate_dissipativity(obj: Objective, domain, resolution: int = 2001) -> DissipativityEstimate:
    """Certify <grad u(theta), theta> >= a|theta|^2 - b on a grid.

    Scans the dyadic ladder 2^-10 .. 2^2 for ``a``; each rung gets the smallest
    admissible ``b`` on the grid (plus a 1e-9 margin). Among rungs with
    ``b <= 1e6`` the one with the smallest ball radius sqrt(b/a) is returned,
    ties going to the larger ``a``.
    """
    if obj.dim > 2:
        raise ValidationError("dissipativity scan supports dim <= 2")
    _, mesh = _scan_grid(domain, resolution, obj.dim)
    pts = mesh.reshape(-1, obj.dim)
    inner = np.einsum("ij,ij->i", obj.gradient(pts), pts)
    sq = np.einsum("ij,ij->i", pts, pts)
    best = None
    for a in _A_LADDER:
        b = max(float(np.max(a * sq - inner)), 0.0) + _B_FLOOR
        if b > _B_CAP:
            continue
        radius = math.sqrt(b / a)
        if best is None or radius <= best[2]:
            best = (a, b, radius)
    if best is None:
        raise ValidationError("no dissipativity certificate on ladder")
    vals = obj.value(mesh)
    mins = _grid_minimizers(vals, mesh).reshape(-1, obj.dim)
    return DissipativityEstimate(best[0], best[1], best[2], (tuple(float(x) for x in np.ravel(domain[0])), tuple(float(x) for x in np.ravel(domain[1])), int(resolution)), mins)


def estimate_gradient_lipschitz(obj: Objective, radius: float, resolution: int = 2001) -> float:
    """Largest Hessian spectral norm over the box |theta_i| <= radius."""
    _, mesh = _scan_grid((-radius, radius), resolution if obj.dim == 1 else min(resolution, 201), obj.dim)
    pts = mesh.reshape(-1, obj.dim)
    if obj.axis_polys is not None:
        return float(np.max(np.abs(obj.hvp(pts, np.ones(obj.dim)))))
    return float(max(np.abs(np.linalg.eigvalsh(obj.hessian(p))).max() for p in pts))
