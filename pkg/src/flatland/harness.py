"""Experiment configuration, the excess-risk curve and reproducible run directories."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import shutil
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import gibbs, kernels, netlab
from .errors import FlatlandError, QuadratureGuardError, ValidationError
from .objective import Objective, exact_model, parse_objective
from .smoothing import smoothed_values_crn
from .transport import wp_to_measure

__all__ = [
    "ExperimentConfig",
    "ExcessRiskResult",
    "run_excess_risk",
    "inf_v",
    "run_experiment",
    "write_csv",
    "dump_json",
    "sha256_file",
    "METRICS",
]

METRICS = ("kl", "w1", "w2", "excess_risk", "spectrum", "basin_mass")


def dump_json(obj, path=None):
    """Canonical JSON (sorted keys, fixed float repr); returns the text."""
    text = json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue())


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# excess risk


@lru_cache(maxsize=64)
def _inf_v_cached(name, sigma, grid):
    return gibbs.grid_argmin(parse_objective(name), "v", grid, sigma)


def inf_v(obj: Objective, sigma: float, grid: gibbs.GridSpec):
    """(arg min, min) of v on the grid with a local polish; cached for builtins."""
    try:
        parse_objective(obj.name)
        theta, val = _inf_v_cached(obj.name, float(sigma), grid)
    except ValidationError:
        theta, val = gibbs.grid_argmin(obj, "v", grid, sigma)
    return np.array(theta), float(val)


def _shared_draw_se(obj, points, eps, rng, n_points=256, n_eps=20_000):
    """Standard error that one shared draw set adds to a mean of g_eps.

    Every chain sees the same eps, so their error is common to all of them and
    invisible in the spread across chains.
    """
    pts = points.reshape(-1, obj.dim)
    pts = pts[rng.choice(len(pts), min(n_points, len(pts)), replace=False)]
    sub = eps[rng.choice(len(eps), min(n_eps, len(eps)), replace=False)]
    h = smoothed_values_crn(obj, sub[:, None, :], pts).mean(axis=1)
    return float(h.std(ddof=1) / math.sqrt(len(eps)))


@dataclass
class ExcessRiskResult:
    checkpoints: list
    gap: np.ndarray
    gap_se: np.ndarray
    plateau: float
    plateau_se: float
    inf_v: float
    grad_evals: int
    sigma: float
    beta: float

    def rows(self):
        return [(k, float(g), float(s)) for k, g, s in zip(self.checkpoints, self.gap, self.gap_se)]

    def to_dict(self):
        return {
            "checkpoints": self.checkpoints,
            "gap": self.gap,
            "gap_se": self.gap_se,
            "plateau": self.plateau,
            "plateau_se": self.plateau_se,
            "inf_v": self.inf_v,
            "grad_evals": self.grad_evals,
            "sigma": self.sigma,
            "beta": self.beta,
        }


def run_excess_risk(obj: Objective, cfg: kernels.KernelConfig, n_steps: int, n_chains: int, n_mc: int,
                    grid: gibbs.GridSpec, seed: int = 0, init=None, sgm=None) -> ExcessRiskResult:
    """E[g_eps(theta_k)] - inf v along geometric checkpoints.

    The per-checkpoint gap averages over chains; the plateau averages the
    thinned post-burn-in iterates of every chain. Standard errors combine the
    spread across chains with the error of the shared perturbation draws.
    """
    sigma = cfg.sigma
    if init is None:
        init = np.zeros(obj.dim)
    sgm = exact_model(obj) if sgm is None else sgm
    _, vmin = inf_v(obj, sigma, grid)
    ens = kernels.run_ensemble(init, cfg, sgm, n_steps, n_chains, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0x6E5,)))
    eps = sigma * rng.standard_normal((int(n_mc), obj.dim))
    se_rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0x6E5, 1)))
    gaps, ses = [], []
    for states in ens.states:
        vals = smoothed_values_crn(obj, states, eps) - vmin
        gaps.append(float(vals.mean()))
        chain_se = float(vals.std(ddof=1) / math.sqrt(n_chains)) if n_chains > 1 else 0.0
        ses.append(math.hypot(chain_se, _shared_draw_se(obj, states, eps, se_rng)))
    gaps, ses = np.array(gaps), np.array(ses)
    bad = gaps < -4 * ses - 1e-12
    if bad.any():
        k = ens.checkpoints[int(np.argmax(bad))]
        raise QuadratureGuardError(f"negative excess risk {gaps[bad][0]:.3g} at k={k}: inf v oracle is broken")
    pooled = ens.pooled.reshape(-1, n_chains, obj.dim)
    per_chain = (smoothed_values_crn(obj, pooled, eps) - vmin).mean(axis=0)
    plateau = float(per_chain.mean())
    plateau_se = float(per_chain.std(ddof=1) / math.sqrt(n_chains)) if n_chains > 1 else 0.0
    plateau_se = math.hypot(plateau_se, _shared_draw_se(obj, pooled, eps, se_rng))
    return ExcessRiskResult(ens.checkpoints, gaps, ses, plateau, plateau_se, vmin, ens.grad_evals, sigma, cfg.beta)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """One JSON document describing a sampler experiment or a netlab comparison."""

    name: str = "experiment"
    objective: str | None = None
    netlab: dict | None = None
    kernels: list = field(default_factory=list)
    betas: list | None = None
    chain: dict = field(default_factory=lambda: {"n_steps": 10_000, "n_chains": 4})
    metrics: list = field(default_factory=list)
    region: list | None = None
    grid: dict | None = None
    n_mc: int = 100_000
    n_ref: int = 2048
    seed: int = 0

    _FIELDS = ("name", "objective", "netlab", "kernels", "betas", "chain", "metrics", "region", "grid", "n_mc", "n_ref", "seed")

    def to_dict(self):
        return {k: getattr(self, k) for k in self._FIELDS}

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls._FIELDS)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

    def dumps(self):
        return dump_json(self.to_dict())

    def sha256(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def validate(self):
        if (self.objective is None) == (self.netlab is None):
            raise ValidationError("config needs exactly one of 'objective' or 'netlab'")
        bad = [m for m in self.metrics if m not in METRICS]
        if bad:
            raise ValidationError(f"unknown metrics {bad}; expected a subset of {METRICS}")
        if self.netlab is not None:
            labels = self.netlab.get("kernels", [])
            for lab in labels:
                netlab.kernel_for(lab, sigma=netlab.SIGMA_BAND[0])
            return self
        obj = parse_objective(self.objective)
        if not self.kernels:
            raise ValidationError("config lists no kernels")
        for spec in self.kernels:
            self.kernel_config(spec, self.betas[0] if self.betas else None)
        if self.betas is not None and (len(self.betas) == 0 or any(b <= 0 for b in self.betas)):
            raise ValidationError("betas must be a non-empty list of positive values")
        needs_grid = {"kl", "w1", "w2", "excess_risk", "basin_mass"} & set(self.metrics)
        if needs_grid:
            if self.grid is None:
                raise ValidationError(f"metrics {sorted(needs_grid)} need a grid")
            self.grid_spec(obj.dim)
        if "basin_mass" in self.metrics and self.region is None:
            raise ValidationError("basin_mass needs a region")
        c = self.chain
        if int(c.get("n_steps", 0)) < 1 or int(c.get("n_chains", 0)) < 1:
            raise ValidationError("chain needs positive n_steps and n_chains")
        return self

    def grid_spec(self, dim):
        g = self.grid
        return gibbs.GridSpec(tuple(np.broadcast_to(g["lo"], (dim,))), tuple(np.broadcast_to(g["hi"], (dim,))), int(g["n"]))

    @staticmethod
    def kernel_config(spec, beta=None):
        spec = dict(spec)
        spec.pop("label", None)
        if beta is not None:
            if spec.get("eta") is not None:
                spec.pop("sigma", None)
                spec.pop("beta", None)
                kind = spec.pop("kind", "fSGLD")
                return kernels.KernelConfig.coupled(kind, beta=float(beta), **spec)
            if spec.get("kind") not in ("SGD", "SAM", "RWP_SGD"):
                spec["beta"] = float(beta)
        try:
            return kernels.KernelConfig.from_dict(spec)
        except TypeError as exc:
            raise ValidationError(f"bad kernel spec {spec}: {exc}") from None

    def expand_rows(self):
        """(row_id, beta, label, KernelConfig) for every (beta, kernel) pair."""
        rows = []
        betas = self.betas if self.betas is not None else [None]
        for bi, beta in enumerate(betas):
            for ki, spec in enumerate(self.kernels):
                label = spec.get("label") or spec.get("kind", "fSGLD").lower()
                row_id = f"b{bi}-{label}" if self.betas is not None else label
                rows.append((row_id, beta, label, self.kernel_config(spec, beta)))
        return rows


# ---------------------------------------------------------------------------
# run directories


def _read_manifest(out):
    path = out / "manifest.json"
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError:
        return {"complete": False}


def _write_manifest(out, cfg, files, figures, complete, error=None):
    data = {
        "name": cfg.name,
        "config_sha256": cfg.sha256(),
        "complete": complete,
        "files": {f: sha256_file(out / f) for f in sorted(files)},
        "figures": sorted(figures),
    }
    if error:
        data["error"] = error
    dump_json(data, out / "manifest.json")
    return data


def _chain_rows(trajs):
    for t in trajs:
        for k, theta in zip(t.steps, t.iterates):
            yield (t.chain_id, int(k), *map(float, theta))


def _sampler_rows(cfg: ExperimentConfig, out: Path, files: list, figures: list, make_figures: bool):
    obj = parse_objective(cfg.objective)
    grid = cfg.grid_spec(obj.dim) if cfg.grid else None
    sgm = exact_model(obj)
    c = cfg.chain
    n_steps, n_chains = int(c["n_steps"]), int(c["n_chains"])
    init = c.get("init", [0.0] * obj.dim)
    (out / "chains").mkdir(exist_ok=True)
    results = []
    for ri, (row_id, beta, label, kcfg) in enumerate(cfg.expand_rows()):
        row = {"row_id": row_id, "kernel": label, "kind": kcfg.kind,
               "beta": None if math.isinf(kcfg.beta) else kcfg.beta, "sigma": kcfg.sigma, "valid": True, "error": ""}
        try:
            trajs = kernels.run_chains(init, kcfg, sgm, n_steps, n_chains, c.get("burn_in"), c.get("thin"), seed=cfg.seed + 1000 * ri)
            rel = f"chains/{row_id}.csv"
            write_csv(out / rel, ["chain_id", "step"] + [f"theta_{i}" for i in range(obj.dim)], _chain_rows(trajs))
            files.append(rel)
            row["grad_evals"] = sum(t.grad_evals for t in trajs)
            pooled = np.concatenate([t.iterates for t in trajs])
            row.update(_row_metrics(cfg, obj, kcfg, pooled, trajs, grid, ri))
        except FlatlandError as exc:
            row["valid"] = False
            row["error"] = str(exc)
        results.append(row)
    keys = ["row_id", "kernel", "kind", "beta", "sigma", "grad_evals"]
    extra = sorted({k for r in results for k in r} - set(keys) - {"valid", "error"})
    header = keys + extra + ["valid"]
    write_csv(out / "metrics/rows.csv", header, ([r.get(k, "") if r.get(k) is not None else "" for k in header] for r in results))
    files.append("metrics/rows.csv")
    dump_json(results, out / "metrics/rows.json")
    files.append("metrics/rows.json")
    if make_figures and grid is not None and obj.dim == 1:
        from . import plots

        plots.plot_rows_histograms(cfg, obj, out, results, out / "figures/chains.png")
        figures.append("figures/chains.png")
    return results


def _row_metrics(cfg, obj, kcfg, pooled, trajs, grid, ri):
    m = {}
    wanted = set(cfg.metrics)
    if not wanted or grid is None:
        return m
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.seed), spawn_key=(0x3E7, ri)))
    finite_beta = not math.isinf(kcfg.beta)
    target = gibbs.build_gibbs(obj, "v", kcfg.beta, grid, sigma=kcfg.sigma) if finite_beta else None
    sub = pooled
    if len(sub) > cfg.n_ref and obj.dim == 1:
        sub = pooled[np.linspace(0, len(pooled) - 1, cfg.n_ref).astype(int)]
    for p, key in ((1, "w1"), (2, "w2")):
        if key in wanted:
            if target is None:
                m[key], m[key + "_se"] = math.nan, math.nan
            else:
                m[key], m[key + "_se"] = wp_to_measure(sub, target, p, min(cfg.n_ref, len(sub)) if obj.dim == 2 else cfg.n_ref, rng)
    if "kl" in wanted:
        if target is None or kcfg.sigma == 0:
            m["kl"] = 0.0 if target is not None else math.nan
        else:
            eps = kcfg.sigma * rng.standard_normal((cfg.n_mc, obj.dim))
            smoothed = gibbs.build_gibbs(obj, "g_eps", kcfg.beta, target.grid, sigma=kcfg.sigma, eps=eps, expand=False)
            m["kl"] = gibbs.kl(smoothed, target)
    if "basin_mass" in wanted:
        lo, hi = cfg.region
        lo_a = np.broadcast_to(np.asarray(lo, dtype=float), (obj.dim,))
        hi_a = np.broadcast_to(np.asarray(hi, dtype=float), (obj.dim,))
        inside = np.all((pooled >= lo_a) & (pooled <= hi_a), axis=1)
        m["basin_chain"] = float(inside.mean())
        m["basin_quadrature"] = gibbs.mass_in_region(target, (lo, hi)) if target is not None else math.nan
    if "excess_risk" in wanted:
        _, vmin = inf_v(obj, kcfg.sigma, grid)
        eps = kcfg.sigma * rng.standard_normal((cfg.n_mc, obj.dim))
        per_chain = np.array([(smoothed_values_crn(obj, t.iterates, eps) - vmin).mean() for t in trajs])
        m["excess_risk"] = float(per_chain.mean())
        chain_se = float(per_chain.std(ddof=1) / math.sqrt(len(trajs))) if len(trajs) > 1 else 0.0
        m["excess_risk_se"] = math.hypot(chain_se, _shared_draw_se(obj, pooled, eps, rng))
    if "spectrum" in wanted:
        from .curvature import spectrum

        theta = pooled[-1]
        rep = spectrum(lambda v: obj.hvp(theta, v), obj.dim, k=min(obj.dim, 10), m=1000, rng=rng)
        m["lambda_max"] = rep.top_eigenvalues[0]
        m["trace"] = rep.trace_mean
    return m


def _netlab_rows(cfg, out, files, figures, make_figures):
    spec = dict(cfg.netlab)
    ds = netlab.make_dataset(int(spec.get("n_train", 2000)), int(spec.get("n_test", 1000)), float(spec.get("rho", 0.2)), cfg.seed)
    seeds = range(cfg.seed, cfg.seed + int(spec.get("seeds", 5)))
    rows = netlab.train_compare(ds, spec.get("kernels", ["sgd", "fsgld-coupled"]), int(spec.get("steps", 20_000)),
                                int(spec.get("batch", 64)), seeds, float(spec.get("step_size", 0.05)))
    write_netlab_outputs(rows, out / "metrics/netlab.csv", out / "runs", dataset=spec | {"seed": cfg.seed})
    files.append("metrics/netlab.csv")
    dump_json(netlab.summarize(rows), out / "metrics/netlab_summary.json")
    files.append("metrics/netlab_summary.json")
    if make_figures:
        from . import plots

        plots.plot_netlab(rows, out / "figures/netlab.png")
        figures.append("figures/netlab.png")
    return rows


NETLAB_COLUMNS = ["kernel", "seed", "test_acc", "train_loss", "trace", "lambda_max", "grad_evals", "valid"]


def write_netlab_outputs(rows, csv_path, runs_dir=None, dataset=None):
    """netlab.csv plus one .npz of final parameters per valid (kernel, seed)."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_csv(csv_path, NETLAB_COLUMNS + ["sigma"], ([r[k] for k in NETLAB_COLUMNS] + [r.get("sigma", math.nan)] for r in rows))
    if runs_dir is not None:
        runs_dir = Path(runs_dir)
        runs_dir.mkdir(parents=True, exist_ok=True)
        for r in rows:
            if r["valid"]:
                np.savez(runs_dir / f"{r['kernel']}-seed{r['seed']}.npz", params=r["params"],
                         dataset=json.dumps(_plain(dataset or {}), sort_keys=True))


def run_experiment(cfg: ExperimentConfig, out_dir, force: bool = False, figures: bool = True) -> Path:
    """Execute a validated config into ``out_dir`` and return the directory.

    Re-running an identical config against a complete directory is a no-op;
    any other existing directory is refused unless ``force`` is set.
    """
    cfg.validate()
    out = Path(out_dir)
    manifest = _read_manifest(out)
    if manifest is not None:
        if manifest.get("complete") and manifest.get("config_sha256") == cfg.sha256():
            return out
        if not force:
            raise ValidationError(f"{out} holds a different or incomplete run; pass force to replace it")
        shutil.rmtree(out)
    elif out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"{out} exists and is not a run directory")
    (out / "metrics").mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    files = ["config.json"]
    figs = []
    _write_manifest(out, cfg, files, figs, complete=False)
    try:
        if cfg.netlab is not None:
            rows = _netlab_rows(cfg, out, files, figs, figures)
            summary = netlab.summarize(rows)
            lines = [f"{k}: " + ", ".join(f"{m}={v[0]:.4g}" for m, v in s.items() if m != "n_valid") for k, s in summary.items()]
        else:
            rows = _sampler_rows(cfg, out, files, figs, figures)
            lines = [f"{r['row_id']}: " + ", ".join(f"{k}={r[k]:.4g}" for k in sorted(r) if isinstance(r[k], float) and k not in ("beta", "sigma"))
                     + ("" if r["valid"] else f" INVALID ({r['error']})") for r in rows]
    except Exception as exc:
        _write_manifest(out, cfg, files, figs, complete=False, error=str(exc))
        raise
    (out / "summary.txt").write_text(f"{cfg.name}\n" + "\n".join(lines) + "\n")
    files.append("summary.txt")
    _write_manifest(out, cfg, files, figs, complete=True)
    return out
