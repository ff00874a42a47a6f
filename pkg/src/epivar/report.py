"""Output writers for experiment runs: delimited files plus rendered figures.

Every task writes its numeric results as CSV/JSON and renders a matching
PNG next to them.  Figures are conveniences; the delimited files carry the
full data.
"""

from __future__ import annotations

import csv
import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_METHOD_COLORS = {
    "ann": "tab:blue",
    "soft-margin": "tab:orange",
    "contact-tracing": "tab:green",
    "oracle": "tab:red",
}


def method_color(name: str):
    base = name.split("[")[0]
    return _METHOD_COLORS.get(base, "tab:gray")


def write_metrics_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_marginals_csv(path, marginals: np.ndarray) -> None:
    rows = []
    n, horizon_plus, _ = marginals.shape
    for i in range(n):
        for t in range(horizon_plus):
            rows.append([i, t, *(float(marginals[i, t, s]) for s in range(3))])
    write_csv(path, ["i", "t", "p_S", "p_I", "p_R"], rows)


def save_fraction_found_figure(path, curves: dict) -> None:
    """curves: method name -> RankingCurve."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve in sorted(curves.items()):
        ax.plot(curve.fractions, curve.found,
                label=f"{name} (AUC {curve.auc:.3f})", color=method_color(name))
    ax.plot([0, 1], [0, 1], ls=":", color="gray", lw=1, label="random")
    ax.set_xlabel("fraction of ranked candidates")
    ax.set_ylabel("fraction of sources found")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_auc_strip_figure(path, per_method_aucs: dict, ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    names = sorted(per_method_aucs)
    for k, name in enumerate(names):
        vals = np.asarray(per_method_aucs[name], dtype=float)
        x = np.full(len(vals), k, dtype=float)
        x += np.linspace(-0.12, 0.12, len(vals)) if len(vals) > 1 else 0.0
        ax.plot(x, vals, "o", ms=4, alpha=0.6, color=method_color(name))
        ax.hlines(vals.mean(), k - 0.25, k + 0.25, color=method_color(name), lw=2)
    ax.set_xticks(range(len(names)), names, rotation=15)
    ax.set_ylabel(ylabel)
    ax.axhline(0.5, ls=":", color="gray", lw=1)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_scaling_figure(path, rows) -> None:
    """rows: dicts with method, n_infected, samples, converged."""
    fig, ax = plt.subplots(figsize=(5, 4))
    seen = set()
    for row in rows:
        name = row["method"]
        marker = "o" if row["converged"] else "x"
        label = name if name not in seen else None
        if row["converged"]:
            seen.add(name)
        ax.semilogy(row["n_infected"], row["samples"], marker,
                    color=method_color(name), label=label)
    ax.set_xlabel("epidemic size (infected at final time)")
    ax.set_ylabel("samples to convergence")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_param_trajectories_figure(path, trajectories, truth: float, ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for traj in trajectories:
        ax.plot(np.arange(1, len(traj) + 1), traj, lw=0.8, alpha=0.7)
    ax.axhline(truth, color="black", ls="--", lw=1.2, label="truth")
    ax.set_xlabel("training step")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_elbo_difference_figure(path, diffs) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    diffs = np.asarray(diffs, dtype=float)
    x = np.linspace(-0.1, 0.1, len(diffs)) if len(diffs) > 1 else [0.0]
    ax.plot(x, diffs, "o", alpha=0.7)
    ax.axhline(0.0, color="gray", ls=":")
    ax.set_xticks([])
    ax.set_ylabel("log-evidence bound: structured minus shuffled class map")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_diagnose_figures(out_dir, cumulative: np.ndarray, hamming: np.ndarray,
                          prior_logprobs: np.ndarray, reference_logprob: float,
                          reference_cumulative: np.ndarray) -> None:
    t = np.arange(cumulative.shape[1])
    fig, ax = plt.subplots(figsize=(5, 4))
    for row in cumulative:
        ax.plot(t, row, color="tab:orange", alpha=0.05, lw=0.7)
    ax.plot(t, reference_cumulative, color="tab:blue", lw=2, label="reference")
    ax.set_xlabel("day")
    ax.set_ylabel("cumulative infected")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "cumulative_infected.png", dpi=150)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    for row in hamming:
        ax.plot(t, row, color="tab:orange", alpha=0.05, lw=0.7)
    ax.plot(t, hamming.mean(axis=0), color="black", lw=2, label="mean")
    ax.set_xlabel("day")
    ax.set_ylabel("distance to reference configuration")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "hamming_distance.png", dpi=150)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    finite = prior_logprobs[np.isfinite(prior_logprobs)]
    if finite.size:
        spread = np.ptp(finite) > 1e-9 * max(1.0, abs(float(finite.mean())))
        ax.hist(finite, bins=40 if spread else 1, color="tab:orange", alpha=0.8)
    ax.axvline(reference_logprob, color="tab:blue", lw=2, label="reference")
    ax.set_xlabel("log prior probability of cascade")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "prior_logprob_hist.png", dpi=150)
    plt.close(fig)
