"""Desk-scale noisy-label experiment: a 2-16-16-2 tanh MLP trained by each kernel."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .curvature import hutchinson_trace, hvp_fd, lanczos_topk
from .errors import DivergenceError, ValidationError
from .kernels import KernelConfig, run_chain
from .objective import Objective, StochasticGradientModel

__all__ = [
    "NoisyDataset",
    "MlpModel",
    "make_dataset",
    "loss_and_grad",
    "NetlabGradientModel",
    "kernel_for",
    "train_one",
    "train_compare",
    "summarize",
    "curvature_at",
    "KERNEL_LABELS",
    "SIGMA_BAND",
]

LAYERS = (2, 16, 16, 2)
FIXED_BETA = 1e14
COUPLED_ETA = 0.01
SIGMA_BAND = tuple(float(s) for s in np.logspace(-3, -2, 5))
KERNEL_LABELS = ("sgd", "sgld", "fsgld-coupled", "fsgld-fixed", "sam", "rwp")
CURVATURE_SUBSAMPLE = 1000


@dataclass(frozen=True)
class NoisyDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    flip_rate: float
    seed: int
    flipped_mask: np.ndarray


def _moons(n, rng, jitter):
    n_out = n // 2
    n_in = n - n_out
    t_out = rng.uniform(0, math.pi, n_out)
    t_in = rng.uniform(0, math.pi, n_in)
    outer = np.column_stack([np.cos(t_out), np.sin(t_out)])
    inner = np.column_stack([1 - np.cos(t_in), 0.5 - np.sin(t_in)])
    X = np.vstack([outer, inner]) + jitter * rng.standard_normal((n, 2))
    y = np.concatenate([np.zeros(n_out, dtype=int), np.ones(n_in, dtype=int)])
    perm = rng.permutation(n)
    return X[perm], y[perm]


def make_dataset(n_train: int = 2000, n_test: int = 1000, rho: float = 0.2, seed: int = 0, jitter: float = 0.15) -> NoisyDataset:
    """Two interleaved half moons; train labels flipped i.i.d. with probability rho."""
    if not 0 <= rho < 0.5:
        raise ValidationError("flip rate must lie in [0, 0.5)")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0xDA7A,)))
    X_tr, y_tr = _moons(n_train, rng, jitter)
    X_te, y_te = _moons(n_test, rng, jitter)
    flipped = rng.random(n_train) < rho
    y_noisy = np.where(flipped, 1 - y_tr, y_tr)
    return NoisyDataset(X_tr, y_noisy, X_te, y_te, float(rho), int(seed), flipped)


class MlpModel:
    """Fixed 2-16-16-2 tanh network addressed through one flat parameter vector."""

    layers = LAYERS

    def __init__(self):
        self.shapes = []
        for fan_in, fan_out in zip(LAYERS[:-1], LAYERS[1:]):
            self.shapes += [(fan_in, fan_out), (fan_out,)]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.dim = sum(self.sizes)

    def unflatten(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.dim,):
            raise ValidationError(f"expected {self.dim} parameters, got {params.shape}")
        out, pos = [], 0
        for shape, size in zip(self.shapes, self.sizes):
            out.append(params[pos:pos + size].reshape(shape))
            pos += size
        return out

    def flatten(self, arrays):
        return np.concatenate([np.ravel(a) for a in arrays])

    def init_params(self, rng):
        arrays = []
        for fan_in, fan_out in zip(LAYERS[:-1], LAYERS[1:]):
            arrays.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(1.0 / fan_in))
            arrays.append(np.zeros(fan_out))
        return self.flatten(arrays)

    def logits(self, params, X):
        W1, b1, W2, b2, W3, b3 = self.unflatten(params)
        h1 = np.tanh(X @ W1 + b1)
        h2 = np.tanh(h1 @ W2 + b2)
        return h2 @ W3 + b3

    def predict(self, params, X):
        return np.argmax(self.logits(params, X), axis=1)

    def accuracy(self, params, X, y):
        return float(np.mean(self.predict(params, X) == y))


def _fingerprint(X, y):
    h = hashlib.sha1(np.ascontiguousarray(X).tobytes() + np.ascontiguousarray(y).tobytes())
    return h.hexdigest()[:12]


def loss_and_grad(model: MlpModel, params, X, y, weights=None):
    """Mean softmax cross-entropy and its backpropagated gradient.

    ``weights`` turns the mean into sum(w_i l_i) / sum(w_i).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    n = len(X)
    if n == 0:
        raise ValidationError("empty batch")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    W1, b1, W2, b2, W3, b3 = model.unflatten(params)
    # non-finite parameters surface as the DivergenceError below
    with np.errstate(invalid="ignore", over="ignore"):
        h1 = np.tanh(X @ W1 + b1)
        h2 = np.tanh(h1 @ W2 + b2)
        z = h2 @ W3 + b3
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(n)
    loss = float(w @ (lse - z[rows, y]))
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss on batch {_fingerprint(X, y)}")
    dz = np.exp(z - lse[:, None])
    dz[rows, y] -= 1.0
    dz *= w[:, None]
    gW3 = h2.T @ dz
    gb3 = dz.sum(axis=0)
    da2 = (dz @ W3.T) * (1 - h2 * h2)
    gW2 = h1.T @ da2
    gb2 = da2.sum(axis=0)
    da1 = (da2 @ W2.T) * (1 - h1 * h1)
    gW1 = X.T @ da1
    gb1 = da1.sum(axis=0)
    return loss, model.flatten([gW1, gb1, gW2, gb2, gW3, gb3])


class NetlabGradientModel(StochasticGradientModel):
    """Minibatch gradients of the training loss; epochs reshuffle without replacement."""

    mode = "minibatch"

    def __init__(self, model: MlpModel, X, y, batch_size: int):
        if not 1 <= batch_size <= len(X):
            raise ValidationError("batch size must lie in [1, n_train]")
        self.model = model
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y)
        self.batch_size = int(batch_size)
        super().__init__(_full_batch_objective(model, self.X, self.y))

    def sample(self, rng):
        return rng.choice(len(self.X), self.batch_size, replace=False)

    def stream(self, rng):
        n, b = len(self.X), self.batch_size
        while True:
            perm = rng.permutation(n)
            for s in range(0, n - b + 1, b):
                yield perm[s:s + b]

    def grad(self, theta, X):
        if X is None:
            return loss_and_grad(self.model, theta, self.X, self.y)[1]
        return loss_and_grad(self.model, theta, self.X[X], self.y[X])[1]


def _full_batch_objective(model, X, y):
    def value(theta):
        return loss_and_grad(model, theta, X, y)[0]

    def gradient(theta):
        return loss_and_grad(model, theta, X, y)[1]

    def hvp(theta, v):
        return hvp_fd(gradient, theta, v)

    def trace(theta):
        eye = np.eye(model.dim)
        return float(sum(hvp(theta, eye[i])[i] for i in range(model.dim)))

    return Objective(model.dim, value, gradient, hvp, trace, None, name="netlab", smoothness_order=10**6)


def kernel_for(label: str, step_size: float = 0.05, sigma: float | None = None, rho: float = 0.05) -> KernelConfig:
    """Map a CLI kernel label to its configuration."""
    if label == "sgd":
        return KernelConfig("SGD", step_size)
    if label == "sgld":
        return KernelConfig("SGLD", step_size, beta=FIXED_BETA)
    if label == "fsgld-fixed":
        return KernelConfig("fSGLD", step_size, beta=FIXED_BETA, sigma=sigma)
    if label == "fsgld-coupled":
        return KernelConfig("fSGLD", step_size, sigma=sigma, eta=COUPLED_ETA)
    if label == "sam":
        return KernelConfig("SAM", step_size, rho=rho)
    if label == "rwp":
        return KernelConfig("RWP_SGD", step_size, sigma=sigma)
    raise ValidationError(f"unknown netlab kernel {label!r}; expected one of {KERNEL_LABELS}")


def _split_validation(ds: NoisyDataset, frac=0.2):
    n_val = int(len(ds.X_train) * frac)
    # rows are already shuffled at generation time
    return (ds.X_train[n_val:], ds.y_train[n_val:]), (ds.X_train[:n_val], ds.y_train[:n_val])


def curvature_at(model, params, X, y, m=1000, seed=0):
    """Hutchinson trace and Lanczos top eigenvalue of the train loss on <= 1000 rows."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0xC0,)))
    if len(X) > CURVATURE_SUBSAMPLE:
        idx = np.sort(rng.choice(len(X), CURVATURE_SUBSAMPLE, replace=False))
        X, y = X[idx], y[idx]

    def grad(t):
        return loss_and_grad(model, t, X, y)[1]

    def hvp(v):
        return hvp_fd(grad, params, v)

    tr, se = hutchinson_trace(hvp, model.dim, m, rng)
    top = lanczos_topk(hvp, model.dim, 1, rng)
    return tr, se, float(top.top_eigenvalues[0])


def train_one(ds: NoisyDataset, cfg: KernelConfig, n_steps: int, batch_size: int, seed: int, X_fit=None, y_fit=None):
    """Train from a seeded init; returns ``(params, grad_evals)``."""
    model = MlpModel()
    X_fit = ds.X_train if X_fit is None else X_fit
    y_fit = ds.y_train if y_fit is None else y_fit
    sgm = NetlabGradientModel(model, X_fit, y_fit, batch_size)
    init = model.init_params(np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0x1A17,))))
    traj = run_chain(init, cfg, sgm, n_steps, burn_in=n_steps - 1, thin=1, seed=seed, chain_id=0)
    return traj.final_state, traj.grad_evals


def train_compare(ds: NoisyDataset, kernels, n_steps: int = 20_000, batch_size: int = 64, seeds=range(5),
                  step_size: float = 0.05, sigmas=SIGMA_BAND, sam_rho: float = 0.05, m_probes: int = 1000):
    """Train every (kernel, seed) pair and measure accuracy, loss and curvature.

    Kernels with a perturbation scale pick sigma from ``sigmas`` by held-out
    accuracy (ties broken by held-out loss) on a 20% split of the (noisy) training rows, then report the
    selected run. Divergent runs become rows with ``valid=False``.
    """
    seeds = list(seeds)
    kernels = list(kernels)
    if len(kernels) < 2 or len(seeds) < 5:
        raise ValidationError("train_compare needs >= 2 kernels and >= 5 seeds")
    model = MlpModel()
    (X_fit, y_fit), (X_val, y_val) = _split_validation(ds)
    rows = []
    for label in kernels:
        searched = label in ("fsgld-coupled", "fsgld-fixed", "rwp")
        for seed in seeds:
            row = {"kernel": label, "seed": int(seed), "sigma": math.nan}
            try:
                best = None
                for sigma in (sigmas if searched else [None]):
                    cfg = kernel_for(label, step_size, sigma, sam_rho)
                    params, evals = train_one(ds, cfg, n_steps, batch_size, seed, X_fit, y_fit)
                    # accuracy first, lower held-out cross-entropy breaks ties
                    score = (model.accuracy(params, X_val, y_val), -loss_and_grad(model, params, X_val, y_val)[0])
                    if best is None or score > best[0]:
                        best = (score, params, evals, sigma, cfg)
                (val_acc, _), params, evals, sigma, cfg = best
                train_loss = loss_and_grad(model, params, X_fit, y_fit)[0]
                tr, tr_se, lmax = curvature_at(model, params, X_fit, y_fit, m_probes, seed)
                row.update(
                    sigma=math.nan if sigma is None else sigma,
                    beta=None if math.isinf(cfg.beta) else cfg.beta,
                    val_acc=val_acc,
                    test_acc=model.accuracy(params, ds.X_test, ds.y_test),
                    train_loss=train_loss,
                    trace=tr,
                    trace_se=tr_se,
                    lambda_max=lmax,
                    grad_evals=evals,
                    valid=True,
                    params=params,
                )
            except DivergenceError as exc:
                row.update(val_acc=math.nan, test_acc=math.nan, train_loss=math.nan, trace=math.nan,
                           trace_se=math.nan, lambda_max=math.nan, grad_evals=0, valid=False, error=str(exc))
            rows.append(row)
    return rows


def summarize(rows):
    """Mean and std per kernel over valid rows."""
    out = {}
    for label in dict.fromkeys(r["kernel"] for r in rows):
        sel = [r for r in rows if r["kernel"] == label and r["valid"]]
        stats = {"n_valid": len(sel)}
        for key in ("test_acc", "train_loss", "trace", "lambda_max", "grad_evals"):
            vals = np.array([r[key] for r in sel], dtype=float)
            stats[key] = (float(vals.mean()), float(vals.std(ddof=1))) if len(vals) > 1 else (float(vals.mean()) if len(vals) else math.nan, math.nan)
        out[label] = stats
    return out
