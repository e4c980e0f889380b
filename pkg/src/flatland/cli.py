"""Command-line entry point: ``flatland <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import gibbs, harness, kernels, netlab, smoothing, transport
from .curvature import hvp_fd, spectrum
from .errors import FlatlandError, ValidationError
from .objective import exact_model, parse_objective

KERNEL_KINDS = {"sgd": "SGD", "sgld": "SGLD", "fsgld": "fSGLD", "rwp": "RWP_SGD", "sam": "SAM"}


def _floats(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from None


def _emit(text, out):
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _grid(args, dim):
    return gibbs.GridSpec.box(args.lo, args.hi, args.grid, dim)


def _figure(args, fn, *a, **kw):
    if getattr(args, "figure", None):
        from . import plots

        getattr(plots, fn)(*a, args.figure, **kw)


# ---------------------------------------------------------------------------


def cmd_chain(args):
    obj = parse_objective(args.objective)
    kind = KERNEL_KINDS.get(args.kernel.lower())
    if kind is None:
        raise ValidationError(f"unknown kernel {args.kernel!r}; expected one of {sorted(KERNEL_KINDS)}")
    extra = {"rho": args.rho, "n_pert": args.n_pert}
    if args.coupled:
        if args.eta is None:
            raise ValidationError("--coupled needs --eta")
        cfg = kernels.KernelConfig.coupled(kind, step_size=args.step_size, eta=args.eta,
                                           sigma=None if args.beta else args.sigma, beta=args.beta, **extra)
    else:
        beta = kernels.INF if args.beta is None else args.beta
        cfg = kernels.KernelConfig(kind, args.step_size, beta=beta, sigma=args.sigma or 0.0, **extra)
    init = _floats(args.init) if args.init else [0.0] * obj.dim
    if len(init) not in (1, obj.dim):
        raise ValidationError(f"--init needs 1 or {obj.dim} values")
    t0 = time.perf_counter()
    trajs = kernels.run_chains(init, cfg, exact_model(obj), args.steps, args.chains, args.burn_in, args.thin,
                               seed=args.seed, n_jobs=args.threads)
    wall = time.perf_counter() - t0
    out = Path(args.out or "chains.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.write_csv(out, ["chain_id", "step"] + [f"theta_{i}" for i in range(obj.dim)], harness._chain_rows(trajs))
    side = {
        "objective": obj.name,
        "config": cfg.to_dict(),
        "beta": None if math.isinf(cfg.beta) else cfg.beta,
        "steps": args.steps,
        "chains": args.chains,
        "burn_in": trajs[0].burn_in,
        "thin": trajs[0].thin,
        "seed": args.seed,
        "grad_evals": sum(t.grad_evals for t in trajs),
        "wall_time_s": round(wall, 3),
    }
    harness.dump_json(side, out.with_suffix(out.suffix + ".json"))
    _figure(args, "plot_chains", trajs)
    print(f"wrote {out} ({sum(len(t.iterates) for t in trajs)} rows, grad_evals={side['grad_evals']})", file=sys.stderr)


def cmd_surrogate(args):
    obj = parse_objective(args.objective)
    theta = np.array(_floats(args.theta))
    if theta.size == 1 and obj.dim > 1:
        theta = np.full(obj.dim, theta[0])
    if theta.size != obj.dim:
        raise ValidationError(f"--theta needs {obj.dim} values")
    rng = np.random.default_rng(args.seed)
    est = smoothing.estimate_g_eps(obj, theta, args.sigma, args.nmc, rng, antithetic=args.antithetic)
    v = float(smoothing.v_value(obj, theta, args.sigma))
    rem = float(smoothing.remainder_expectation(obj, theta, args.sigma))
    res = {"g_eps_mean": est.mean, "g_eps_se": est.std_error, "v": v, "remainder": rem,
           "residual": est.mean - v - rem, "n_mc": args.nmc, "sigma": args.sigma}
    _emit(harness.dump_json(res), args.out)


def cmd_gibbs(args):
    obj = parse_objective(args.objective)
    grid = _grid(args, obj.dim)
    rng = np.random.default_rng(args.seed)
    m = gibbs.build_gibbs(obj, args.energy, args.beta, grid, sigma=args.sigma, n_mc=args.nmc, rng=rng)
    _emit(harness.dump_json(m.to_dict()), args.out or "measure.json")
    _figure(args, "plot_measure", m, obj=obj)


def cmd_sweep(args):
    obj = parse_objective(args.objective)
    rows = gibbs.coupling_sweep(obj, _floats(args.betas), args.eta, _grid(args, obj.dim), args.nmc, seed=args.seed)
    out = Path(args.out or "sweep.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ["beta", "sigma", "kl", "w2", "kl_err", "valid"]
    harness.write_csv(out, cols, ([r.as_dict()[c] for c in cols] for r in rows))
    for r in rows:
        if not r.valid:
            print(f"beta={r.beta:g}: invalid ({r.error})", file=sys.stderr)
    _figure(args, "plot_sweep", rows)


def _load_cloud(path):
    path = Path(path)
    if path.suffix == ".json":
        return gibbs.GridMeasure.from_dict(json.loads(path.read_text()))
    with path.open() as fh:
        reader = csv.DictReader(fh)
        cols = [c for c in (reader.fieldnames or []) if c.startswith("theta_")]
        if not cols:
            raise ValidationError(f"{path} has no theta_* columns")
        return np.array([[float(r[c]) for c in cols] for r in reader])


def cmd_wdist(args):
    a, b = _load_cloud(args.a), _load_cloud(args.b)
    rng = np.random.default_rng(args.seed)
    if isinstance(a, gibbs.GridMeasure):
        a, b = b, a
    if isinstance(a, gibbs.GridMeasure):
        raise ValidationError("at least one side of wdist must be a sample CSV")
    if isinstance(b, gibbs.GridMeasure):
        w, se = transport.wp_to_measure(a, b, args.p, args.nref, rng)
    elif a.shape[1] == 1:
        w, se = transport.wp_1d(a, b, args.p), 0.0
    else:
        n = min(len(a), len(b), transport.MAX_ASSIGNMENT)
        a = a[np.sort(rng.choice(len(a), n, replace=False))]
        b = b[np.sort(rng.choice(len(b), n, replace=False))]
        w, se = transport.wp_assignment(a, b, args.p), 0.0
    _emit(harness.dump_json({"w": w, "se": se, "p": args.p}), args.out)


def _netlab_operator(run_ref, runs_dir):
    path = Path(run_ref)
    if not path.suffix:
        path = Path(runs_dir) / f"{run_ref}.npz"
    if not path.exists():
        raise ValidationError(f"netlab run {run_ref!r} not found (looked for {path})")
    with np.load(path) as z:
        params = z["params"]
        meta = json.loads(str(z["dataset"]))
    ds = netlab.make_dataset(int(meta.get("n_train", 2000)), int(meta.get("n_test", 1000)),
                             float(meta.get("rho", 0.2)), int(meta.get("seed", 0)))
    (X, y), _ = netlab._split_validation(ds)
    X, y = X[: netlab.CURVATURE_SUBSAMPLE], y[: netlab.CURVATURE_SUBSAMPLE]
    model = netlab.MlpModel()

    def grad(t):
        return netlab.loss_and_grad(model, t, X, y)[1]

    return (lambda v: hvp_fd(grad, params, v)), model.dim


def cmd_spectrum(args):
    target = args.target
    if target.startswith("netlab:"):
        hvp, dim = _netlab_operator(target.split(":", 1)[1], args.runs)
    else:
        obj = parse_objective(target)
        theta = np.array(_floats(args.theta)) if args.theta else np.zeros(obj.dim)
        hvp, dim = (lambda v: obj.hvp(theta, v)), obj.dim
    rep = spectrum(hvp, dim, k=min(args.k, dim), m=args.m, rng=np.random.default_rng(args.seed))
    _emit(harness.dump_json(rep.to_dict()), args.out)
    _figure(args, "plot_spectrum", rep)


def cmd_netlab(args):
    ds = netlab.make_dataset(args.n_train, args.n_test, args.rho, args.seed)
    labels = [s.strip() for s in args.kernels.split(",") if s.strip()]
    seeds = range(args.seed, args.seed + args.seeds)
    rows = netlab.train_compare(ds, labels, args.steps, args.batch, seeds, args.lr)
    out = Path(args.out or "netlab.csv")
    runs = Path(args.runs) if args.runs else out.parent / "runs"
    meta = {"n_train": args.n_train, "n_test": args.n_test, "rho": args.rho, "seed": args.seed}
    harness.write_netlab_outputs(rows, out, runs, meta)
    for label, s in netlab.summarize(rows).items():
        print(f"{label}: trace={s['trace'][0]:.4g} test_acc={s['test_acc'][0]:.4f} grad_evals={s['grad_evals'][0]:.0f}",
              file=sys.stderr)
    _figure(args, "plot_netlab", rows)


def cmd_excess_risk(args):
    obj = parse_objective(args.objective)
    kind = KERNEL_KINDS[args.kernel.lower()]
    if args.eta is not None:
        cfg = kernels.KernelConfig.coupled(kind, step_size=args.step_size, eta=args.eta,
                                           sigma=None if args.beta else args.sigma, beta=args.beta)
    else:
        if args.beta is None:
            raise ValidationError("give --beta or --eta")
        cfg = kernels.KernelConfig(kind, args.step_size, beta=args.beta, sigma=args.sigma or 0.0)
    init = _floats(args.init) if args.init else [0.0] * obj.dim
    res = harness.run_excess_risk(obj, cfg, args.steps, args.chains, args.nmc, _grid(args, obj.dim), args.seed, init)
    out = Path(args.out or "excess_risk.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    harness.write_csv(out, ["k", "gap", "se"], res.rows())
    harness.dump_json({k: v for k, v in res.to_dict().items() if k not in ("checkpoints", "gap", "gap_se")},
                      out.with_suffix(out.suffix + ".json"))
    print(f"plateau gap {res.plateau:.6g} +/- {res.plateau_se:.2g} (inf v = {res.inf_v:.6g})", file=sys.stderr)
    _figure(args, "plot_excess_risk", {cfg.kind: res})


def cmd_run(args):
    cfg = harness.ExperimentConfig.load(args.config)
    if args.seed_given:
        cfg.seed = args.seed
    out = Path(args.out or Path("runs") / cfg.name)
    harness.run_experiment(cfg, out, force=args.force, figures=not args.no_figures)
    print((out / "summary.txt").read_text(), end="", file=sys.stderr)
    print(out)


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for independent chains")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path")

    p = argparse.ArgumentParser(prog="flatland", parents=[common], description="Flatness-aware Langevin optimization lab")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, figure=True):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        if figure:
            sp.add_argument("--figure", help="also render a PNG figure to this path")
        return sp

    def grid_args(sp, n=4096, lo=-4.0, hi=4.0):
        sp.add_argument("--grid", type=int, default=n, help="nodes per axis")
        sp.add_argument("--lo", type=float, default=lo)
        sp.add_argument("--hi", type=float, default=hi)

    sp = add("chain", cmd_chain, "run seeded sampler chains")
    sp.add_argument("--objective", required=True)
    sp.add_argument("--kernel", default="fsgld")
    sp.add_argument("--lambda", dest="step_size", type=float, required=True)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--coupled", action="store_true")
    sp.add_argument("--rho", type=float)
    sp.add_argument("--n-pert", type=int, default=1)
    sp.add_argument("--steps", type=int, default=10_000)
    sp.add_argument("--chains", type=int, default=1)
    sp.add_argument("--burn-in", type=int)
    sp.add_argument("--thin", type=int)
    sp.add_argument("--init", help="comma-separated start point")

    sp = add("surrogate", cmd_surrogate, "Monte Carlo smoothed loss vs its trace expansion", figure=False)
    sp.add_argument("--objective", required=True)
    sp.add_argument("--theta", required=True)
    sp.add_argument("--sigma", type=float, required=True)
    sp.add_argument("--nmc", type=int, default=1_000_000)
    sp.add_argument("--antithetic", action="store_true")

    sp = add("gibbs", cmd_gibbs, "grid Gibbs measure for u, v or g_eps")
    sp.add_argument("--objective", required=True)
    sp.add_argument("--energy", choices=("u", "v", "g_eps"), default="v")
    sp.add_argument("--beta", type=float, required=True)
    sp.add_argument("--sigma", type=float, default=0.0)
    sp.add_argument("--nmc", type=int, default=100_000)
    grid_args(sp)

    sp = add("coupling-sweep", cmd_sweep, "KL/W2 between smoothed and regularized Gibbs measures along the coupling")
    sp.add_argument("--objective", required=True)
    sp.add_argument("--betas", required=True)
    sp.add_argument("--eta", type=float, default=0.01)
    sp.add_argument("--nmc", type=int, default=1_000_000)
    grid_args(sp)

    sp = add("wdist", cmd_wdist, "Wasserstein distance between samples and a sample set or measure", figure=False)
    sp.add_argument("--a", required=True, help="chain CSV or measure JSON")
    sp.add_argument("--b", required=True, help="chain CSV or measure JSON")
    sp.add_argument("--p", type=int, default=2, choices=(1, 2))
    sp.add_argument("--nref", type=int, default=4096)

    sp = add("spectrum", cmd_spectrum, "top-k Hessian eigenvalues and Hutchinson trace")
    sp.add_argument("--target", required=True, help="netlab:<run-id> or an objective id")
    sp.add_argument("--theta", help="evaluation point for objective targets")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--m", type=int, default=1000)
    sp.add_argument("--runs", default="runs", help="directory holding netlab run .npz files")

    sp = add("netlab", cmd_netlab, "noisy-label MLP optimizer comparison")
    sp.add_argument("--rho", type=float, default=0.2)
    sp.add_argument("--steps", type=int, default=20_000)
    sp.add_argument("--batch", type=int, default=64)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--kernels", default="sgd,sgld,fsgld-coupled,fsgld-fixed,sam")
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--n-train", type=int, default=2000)
    sp.add_argument("--n-test", type=int, default=1000)
    sp.add_argument("--runs", help="where to store final parameters (default: <out dir>/runs)")

    sp = add("excess-risk", cmd_excess_risk, "excess-risk curve E[g_eps(theta_k)] - inf v")
    sp.add_argument("--objective", required=True)
    sp.add_argument("--kernel", default="fsgld")
    sp.add_argument("--lambda", dest="step_size", type=float, required=True)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--steps", type=int, default=100_000)
    sp.add_argument("--chains", type=int, default=8)
    sp.add_argument("--nmc", type=int, default=10_000)
    sp.add_argument("--init")
    grid_args(sp, n=2048)

    sp = add("run", cmd_run, "execute a JSON experiment config into a run directory", figure=False)
    sp.add_argument("config")
    sp.add_argument("--force", action="store_true", help="replace an existing run directory")
    sp.add_argument("--no-figures", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = hasattr(args, "seed")
    for name, default in (("seed", 0), ("threads", 1), ("out", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except FlatlandError as exc:
        print(f"flatland: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
