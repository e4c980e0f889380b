"""Figures rendered next to the CSV/JSON outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "plot_chains",
    "plot_rows_histograms",
    "plot_measure",
    "plot_sweep",
    "plot_excess_risk",
    "plot_spectrum",
    "plot_netlab",
]

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "savefig.bbox": "tight",
    # fixed metadata keeps PNG bytes stable across reruns
    "svg.hashsalt": "flatland",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _fig(**kw):
    with plt.rc_context(STYLE):
        return plt.subplots(**kw)


def plot_chains(trajs, path, measure=None):
    """Trace plot of the first coordinate plus a pooled histogram."""
    fig, (ax_t, ax_h) = _fig(ncols=2, figsize=(10, 3.6))
    for t in trajs:
        ax_t.plot(t.steps, t.iterates[:, 0], lw=0.6, alpha=0.8)
    ax_t.set_xlabel("step")
    ax_t.set_ylabel(r"$\theta_0$")
    pooled = np.concatenate([t.iterates[:, 0] for t in trajs])
    ax_h.hist(pooled, bins=80, density=True, alpha=0.6, label="chains")
    if measure is not None and measure.dim == 1:
        ax_h.plot(measure.grid.axes[0], measure.density, "k-", lw=1, label="target")
        ax_h.legend()
    ax_h.set_xlabel(r"$\theta_0$")
    return _save(fig, path)


def plot_rows_histograms(cfg, obj, out, results, path):
    import csv

    fig, ax = _fig()
    for r in results:
        f = Path(out) / "chains" / f"{r['row_id']}.csv"
        if not f.exists():
            continue
        with f.open() as fh:
            vals = np.array([float(row["theta_0"]) for row in csv.DictReader(fh)])
        if len(vals):
            ax.hist(vals, bins=80, density=True, histtype="step", label=r["row_id"])
    ax.set_xlabel(r"$\theta$")
    ax.set_ylabel("density")
    ax.set_title(cfg.name)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_measure(measure, path, obj=None):
    fig, ax = _fig()
    if measure.dim == 1:
        x = measure.grid.axes[0]
        ax.plot(x, measure.density, label=f"{measure.energy_kind}, beta={measure.beta:g}")
        ax.set_xlabel(r"$\theta$")
        ax.set_ylabel("density")
        if obj is not None:
            ax2 = ax.twinx()
            ax2.plot(x, obj.value(x[:, None]), color="0.5", lw=0.8)
            ax2.set_ylabel("u", color="0.5")
        ax.legend(loc="upper left")
    else:
        x, y = measure.grid.axes
        im = ax.pcolormesh(x, y, measure.density.T, shading="auto")
        fig.colorbar(im, ax=ax)
        ax.set_xlabel(r"$\theta_0$")
        ax.set_ylabel(r"$\theta_1$")
    return _save(fig, path)


def plot_sweep(rows, path):
    rows = [r for r in rows if r.valid]
    fig, ax = _fig()
    b = np.array([r.beta for r in rows])
    ax.errorbar(b, [r.kl for r in rows], yerr=[r.kl_err for r in rows], marker="o", label="KL")
    ax.plot(b, [r.w2 for r in rows], marker="s", label=r"$W_2$")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(r"$\beta$")
    ax.legend()
    return _save(fig, path)


def plot_excess_risk(results, path):
    """One or more excess-risk curves; ``results`` maps label to ExcessRiskResult."""
    fig, ax = _fig()
    for label, res in results.items():
        k = np.maximum(np.array(res.checkpoints, dtype=float), 1.0)
        ax.errorbar(k, res.gap, yerr=res.gap_se, marker=".", capsize=2, label=label)
        ax.axhline(res.plateau, ls=":", color=ax.lines[-1].get_color())
    ax.set_xscale("log")
    ax.set_yscale("symlog", linthresh=1e-4)
    ax.set_xlabel("k (k=0 drawn at 1)")
    ax.set_ylabel(r"$E[g_\varepsilon(\theta_k)] - \inf v$")
    ax.legend()
    return _save(fig, path)


def plot_spectrum(report, path):
    fig, ax = _fig()
    ev = np.asarray(report.top_eigenvalues)
    ax.plot(np.arange(1, len(ev) + 1), ev, "o-")
    ax.set_xlabel("index")
    ax.set_ylabel("eigenvalue")
    if not math.isnan(report.trace_mean):
        ax.set_title(f"trace = {report.trace_mean:.4g} +/- {report.trace_se:.2g}")
    return _save(fig, path)


def plot_netlab(rows, path):
    labels = list(dict.fromkeys(r["kernel"] for r in rows))
    fig, (a1, a2) = _fig(ncols=2, figsize=(10, 3.6))
    for i, lab in enumerate(labels):
        sel = [r for r in rows if r["kernel"] == lab and r["valid"]]
        a1.scatter([i] * len(sel), [r["trace"] for r in sel])
        a2.scatter([i] * len(sel), [r["test_acc"] for r in sel])
    for ax, name in ((a1, "Hessian trace"), (a2, "test accuracy")):
        ax.set_xticks(range(len(labels)), labels, rotation=30)
        ax.set_ylabel(name)
    return _save(fig, path)
