"""fSGLD and its baselines under one stepping contract.

All kinds consume the same noise layout per step: ``n_pert * d`` standard
normals for the weight perturbation followed by ``d`` for the Langevin term.
Kinds that ignore a block still consume it, which is what makes SGLD,
fSGLD(sigma=0) and SGD(beta=inf) bit-identical under shared seeds.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import DivergenceError, ValidationError
from .objective import StochasticGradientModel

__all__ = [
    "KINDS",
    "KernelConfig",
    "Trajectory",
    "EnsembleRun",
    "step",
    "run_chain",
    "run_chains",
    "run_ensemble",
    "couple_beta_sigma",
    "sigma_from_beta",
    "lambda_max",
    "chain_rng",
    "geometric_checkpoints",
]

KINDS = ("SGD", "SGLD", "fSGLD", "RWP_SGD", "SAM")
INF = math.inf
SAM_NORM_GUARD = 1e-12
_NOISE_SLOT, _DATA_SLOT = 0, 1
_BLOCK = 4096


def couple_beta_sigma(sigma: float, eta: float) -> float:
    """beta = sigma^(-4/(1+eta)); sigma must lie in (0, 1)."""
    if not 0 < sigma < 1:
        raise ValidationError(f"coupled sigma must lie in (0, 1), got {sigma}")
    if eta < 0:
        raise ValidationError(f"eta must be non-negative, got {eta}")
    return sigma ** (-4.0 / (1.0 + eta))


def sigma_from_beta(beta: float, eta: float) -> float:
    """Inverse of :func:`couple_beta_sigma`: sigma = beta^(-(1+eta)/4)."""
    if not beta > 1:
        raise ValidationError(f"coupled beta must exceed 1, got {beta}")
    return beta ** (-(1.0 + eta) / 4.0)


def lambda_max(a: float, L1: float, phi_fourth_moment: float) -> float:
    """Step-size ceiling min{min(a, a^(1/3)) / (16 (1+L1)^2 sqrt(E(1+phi)^4)), 1/a}."""
    if a <= 0 or L1 < 0 or phi_fourth_moment <= 0:
        raise ValidationError("lambda_max needs a > 0, L1 >= 0 and a positive fourth moment")
    head = min(a, a ** (1.0 / 3.0)) / (16.0 * (1.0 + L1) ** 2 * math.sqrt(phi_fourth_moment))
    return min(head, 1.0 / a)


@dataclass(frozen=True)
class KernelConfig:
    kind: str
    step_size: float
    beta: float = INF
    sigma: float = 0.0
    rho: float | None = None
    eta: float | None = None
    n_pert: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if not self.step_size > 0:
            raise ValidationError("step size must be positive")
        if self.sigma < 0:
            raise ValidationError("perturbation scale must be non-negative")
        if self.kind == "SAM" and not (self.rho is not None and self.rho > 0):
            raise ValidationError("SAM needs a positive radius rho")
        if self.n_pert < 1:
            raise ValidationError("n_pert must be >= 1")
        if self.eta is not None:
            # coupled: beta is a function of sigma, never stored independently
            object.__setattr__(self, "beta", couple_beta_sigma(self.sigma, self.eta))
        if not self.beta > 0:
            raise ValidationError("inverse temperature must be positive")

    @classmethod
    def coupled(cls, kind="fSGLD", *, step_size, eta, sigma=None, beta=None, **kw):
        """Build a coupled config from either sigma or beta."""
        if (sigma is None) == (beta is None):
            raise ValidationError("give exactly one of sigma or beta for a coupled kernel")
        if sigma is None:
            sigma = sigma_from_beta(beta, eta)
        return cls(kind, step_size, sigma=sigma, eta=eta, **kw)

    @property
    def is_coupled(self):
        return self.eta is not None

    @property
    def evals_per_step(self):
        if self.kind == "SAM":
            return 2
        if self.kind in ("fSGLD", "RWP_SGD"):
            return self.n_pert
        return 1

    def noise_width(self, d):
        return (self.n_pert + 1) * d

    def to_dict(self):
        out = asdict(self)
        out["beta"] = None if math.isinf(self.beta) else self.beta
        if self.is_coupled:
            out.pop("beta")
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        beta = data.pop("beta", None)
        if data.get("eta") is not None:
            return cls(**data)
        return cls(beta=INF if beta is None else float(beta), **data)


def _advance(theta, cfg: KernelConfig, sgm: StochasticGradientModel, X, noise):
    """One update from pre-drawn noise; works row-wise on (..., d) states."""
    d = theta.shape[-1]
    kind = cfg.kind
    lam = cfg.step_size
    if kind == "SAM":
        g1 = sgm.grad(theta, X)
        norm = np.linalg.norm(g1, axis=-1, keepdims=True)
        g = sgm.grad(theta + cfg.rho * g1 / (norm + SAM_NORM_GUARD), X)
        return theta - lam * g, g
    if kind == "SGD":
        g = sgm.grad(theta, X)
        return theta - lam * g, g
    sigma = 0.0 if kind == "SGLD" else cfg.sigma
    if cfg.n_pert == 1:
        g = sgm.grad(theta + sigma * noise[..., :d], X)
    else:
        g = sgm.grad(theta + sigma * noise[..., :d], X)
        for j in range(1, cfg.n_pert):
            g = g + sgm.grad(theta + sigma * noise[..., j * d:(j + 1) * d], X)
        g = g / cfg.n_pert
    new = theta - lam * g
    if kind != "RWP_SGD" and not math.isinf(cfg.beta):
        new = new + math.sqrt(2.0 * lam / cfg.beta) * noise[..., cfg.n_pert * d:]
    return new, g


def step(state, cfg: KernelConfig, sgm: StochasticGradientModel, rng, step_index: int = 0) -> np.ndarray:
    """Apply one kernel update. Noise is drawn first, then the data token."""
    state = np.asarray(state, dtype=float)
    noise = rng.standard_normal(cfg.noise_width(state.shape[-1]))
    X = sgm.sample(rng)
    new, g = _advance(state, cfg, sgm, X, noise)
    if not (np.all(np.isfinite(new)) and np.all(np.isfinite(g))):
        raise DivergenceError("non-finite state or gradient", step=step_index)
    return new


def chain_rng(seed: int, chain_id: int, slot: int) -> np.random.Generator:
    """Independent substream for one (seed, chain, slot) triple."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chain_id), int(slot))))


@dataclass
class Trajectory:
    seed: int
    chain_id: int
    iterates: np.ndarray
    burn_in: int
    thin: int
    n_steps: int
    grad_evals: int
    final_state: np.ndarray
    config: KernelConfig | None = field(default=None, repr=False)

    @property
    def steps(self):
        """Step index k of every stored iterate."""
        return self.burn_in + self.thin * np.arange(1, len(self.iterates) + 1)


def default_burn_in_thin(n_steps, max_stored=10_000):
    burn_in = n_steps // 5
    thin = max(1, math.ceil((n_steps - burn_in) / max_stored))
    return burn_in, thin


def run_chain(init, cfg: KernelConfig, sgm: StochasticGradientModel, n_steps: int,
              burn_in: int | None = None, thin: int | None = None, seed: int = 0,
              chain_id: int = 0) -> Trajectory:
    """Run one seeded chain and keep thinned post-burn-in iterates."""
    if burn_in is None or thin is None:
        b, t = default_burn_in_thin(n_steps)
        burn_in = b if burn_in is None else burn_in
        thin = t if thin is None else thin
    if n_steps < 1 or not 0 <= burn_in < n_steps:
        raise ValidationError(f"need 0 <= burn_in < n_steps, got burn_in={burn_in}, n_steps={n_steps}")
    if thin < 1:
        raise ValidationError("thin must be >= 1")
    theta = np.array(init, dtype=float).reshape(sgm.dim)
    d = theta.size
    noise_rng = chain_rng(seed, chain_id, _NOISE_SLOT)
    data = sgm.stream(chain_rng(seed, chain_id, _DATA_SLOT))
    width = cfg.noise_width(d)
    kept = np.empty(((n_steps - burn_in) // thin, d))
    n_kept = 0
    block = noise_rng.standard_normal((min(_BLOCK, n_steps), width))
    pos = 0
    for k in range(1, n_steps + 1):
        if pos == len(block):
            block = noise_rng.standard_normal((min(_BLOCK, n_steps - k + 1), width))
            pos = 0
        with np.errstate(over="ignore", invalid="ignore"):
            theta, g = _advance(theta, cfg, sgm, next(data), block[pos])
        pos += 1
        if not (np.isfinite(theta).all() and np.isfinite(g).all()):
            raise DivergenceError("non-finite state or gradient", step=k)
        if k > burn_in and (k - burn_in) % thin == 0:
            kept[n_kept] = theta
            n_kept += 1
    return Trajectory(seed, chain_id, kept, burn_in, thin, n_steps, n_steps * cfg.evals_per_step, theta.copy(), cfg)


def run_chains(init, cfg, sgm, n_steps, n_chains, burn_in=None, thin=None, seed=0, n_jobs=1) -> list[Trajectory]:
    """Independent chains, returned in ascending chain_id order."""
    inits = np.broadcast_to(np.asarray(init, dtype=float), (n_chains, sgm.dim))
    args = [(inits[c], cfg, sgm, n_steps, burn_in, thin, seed, c) for c in range(n_chains)]
    if n_jobs == 1:
        return [run_chain(*a) for a in args]
    # chains own their generators, so thread scheduling cannot change results
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(lambda a: run_chain(*a), args))


def geometric_checkpoints(n_steps: int, per_decade: int = 2) -> list[int]:
    """0, 10, 10^1.5, 10^2, ... rounded, capped at n_steps and always including it."""
    ks = {0}
    e = 1.0
    while True:
        k = int(round(10**e))
        if k >= n_steps:
            break
        ks.add(k)
        e += 1.0 / per_decade
    ks.add(n_steps)
    return sorted(ks)


@dataclass
class EnsembleRun:
    """States of many lock-stepped chains at checkpoint steps."""

    checkpoints: list[int]
    states: np.ndarray  # (n_checkpoints, n_chains, d)
    pooled: np.ndarray  # thinned post-burn-in iterates of all chains, (m, d)
    grad_evals: int
    seed: int

    def at(self, k):
        return self.states[self.checkpoints.index(k)]


def run_ensemble(init, cfg: KernelConfig, sgm: StochasticGradientModel, n_steps: int, n_chains: int,
                 seed: int = 0, checkpoints: Sequence[int] | None = None, burn_in: int | None = None,
                 thin: int | None = None) -> EnsembleRun:
    """Advance ``n_chains`` chains together with vectorised updates.

    Shares the update arithmetic with :func:`run_chain` but draws noise for the
    whole ensemble from one stream, so individual rows are not bit-identical to
    single-chain runs. Needs a model with ``sample_many`` support (exact or
    additive noise).
    """
    if checkpoints is None:
        checkpoints = geometric_checkpoints(n_steps)
    checkpoints = sorted(set(int(k) for k in checkpoints))
    if checkpoints[-1] > n_steps or checkpoints[0] < 0:
        raise ValidationError("checkpoints must lie in [0, n_steps]")
    if burn_in is None or thin is None:
        b, t = default_burn_in_thin(n_steps, max_stored=max(1, 200_000 // n_chains))
        burn_in = b if burn_in is None else burn_in
        thin = t if thin is None else thin
    if sgm.mode not in ("exact", "additive"):
        raise ValidationError("ensemble runs need an exact or additive-noise gradient model")
    d = sgm.dim
    theta = np.array(np.broadcast_to(np.asarray(init, dtype=float), (n_chains, d)))
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0xE5,)))
    data_rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0xE5, 1)))
    width = cfg.noise_width(d)
    states = []
    pooled = []
    if checkpoints[0] == 0:
        states.append(theta.copy())
    for k in range(1, n_steps + 1):
        noise = rng.standard_normal((n_chains, width))
        with np.errstate(over="ignore", invalid="ignore"):
            theta, g = _advance(theta, cfg, sgm, sgm.sample_many(data_rng, n_chains), noise)
        if not (np.isfinite(theta).all() and np.isfinite(g).all()):
            raise DivergenceError("non-finite state or gradient in ensemble", step=k)
        if k in checkpoints:
            states.append(theta.copy())
        if k > burn_in and (k - burn_in) % thin == 0:
            pooled.append(theta.copy())
    pooled = np.concatenate(pooled) if pooled else np.empty((0, d))
    return EnsembleRun(list(checkpoints), np.stack(states), pooled, n_chains * n_steps * cfg.evals_per_step, seed)
