"""Figures rendered next to the CSV outputs. Headless (Agg) only."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_PANELS = (("l_total",), ("l_mp", "l_up"), ("l_cl", "l_aux"), ("i_sha", "i_uni", "i_str", "i_utr", "l_recon"))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_losses(rows: Sequence[Dict[str, float]], path, steps_per_epoch: int = 0) -> Path:
    """Per-step loss curves in four panels; epoch boundaries marked when ``steps_per_epoch`` is given."""
    steps = [r["step"] for r in rows]
    fig, axes = plt.subplots(2, 2, figsize=(10, 6.5), sharex=True)
    for ax, cols in zip(axes.flat, LOSS_PANELS):
        for c in cols:
            ax.plot(steps, [r[c] for r in rows], lw=0.8, label=c)
        if steps_per_epoch and steps:
            for s in range(steps_per_epoch, int(steps[-1]) + 1, steps_per_epoch):
                ax.axvline(s, color="0.9", lw=0.5, zorder=0)
        ax.legend(fontsize=7, loc="best")
        ax.set_xlabel("step")
    return _save(fig, path)


def plot_mi_bench(rows: Sequence[dict], path) -> Path:
    """Estimates against the closed-form MI, one marker per (rho, dim) cell."""
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    true = [r["true_mi"] for r in rows]
    hi = max(true + [r["infonce"] for r in rows] + [r["nce_club"] for r in rows] + [0.1]) * 1.1
    ax.plot([0, hi], [0, hi], color="0.6", lw=0.8, ls="--", label="true")
    ax.scatter(true, [r["infonce"] for r in rows], label="InfoNCE (shifted)", marker="o")
    ax.scatter(true, [r["nce_club"] for r in rows], label="NCE-CLUB", marker="^")
    for r in rows:
        ax.annotate(f"rho={r['rho']:g}, d={r['dim']}", (r["true_mi"], r["infonce"]), fontsize=6,
                    xytext=(3, -8), textcoords="offset points")
    ax.set_xlabel("true MI (nats)")
    ax.set_ylabel("estimate (nats)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_ablation(summary: Sequence[dict], path, metrics: Sequence[str] = ("acc2", "mse")) -> Path:
    """Median test metric per variant, with the per-seed values as dots."""
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.5 * len(metrics), 4))
    axes = [axes] if len(metrics) == 1 else list(axes)
    names = [s["variant"] for s in summary]
    for ax, m in zip(axes, metrics):
        meds = [s[f"median_{m}"] for s in summary]
        ax.bar(range(len(names)), meds, color="0.75")
        for i, s in enumerate(summary):
            vals: List[float] = s[f"seed_{m}"]
            ax.scatter([i] * len(vals), vals, s=10, color="k", zorder=3)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel(f"test {m}")
    return _save(fig, path)
