"""Matplotlib figures written next to the CSV outputs."""
from __future__ import annotations

import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import COHORTS, CohortReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "repulsive-replay",
}

COLORS = {"baseline": "#4c72b0", "rr_ra": "#dd8452"}


def _save(fig, path) -> None:
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


def plot_precision(report: CohortReport, path, title: str = "") -> None:
    """Per-class precision bars in first-appearance order, with cohort means."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(report.class_ids) + 2), 3.0))
        x = np.arange(len(report.class_ids))
        ax.bar(x, report.precision, color=[f"C{t % 10}" for t in report.first_seen_task])
        ax.set_xticks(x, [str(c) for c in report.class_ids])
        for (name, frac), style in zip(COHORTS, ("-", "--", ":")):
            k = math.ceil(frac * len(x) - 1e-9)
            ax.hlines(report.cohort(name), -0.5, k - 0.5, colors="k", linestyles=style,
                      label=f"{name} {report.cohort(name):.1f}")
        ax.set_ylim(0, 105)
        ax.set_xlabel("class (order of first appearance)")
        ax.set_ylabel("precision (%)")
        ax.legend(loc="lower right", frameon=False)
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_comparison(baseline: CohortReport, variant: CohortReport, path,
                    labels: Sequence[str] = ("baseline", "rr_ra")) -> None:
    """Grouped cohort bars for two runs."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        names = [n for n, _ in COHORTS]
        x = np.arange(len(names))
        for offset, (rep, label, color) in enumerate(
                zip((baseline, variant), labels, COLORS.values())):
            ax.bar(x + (offset - 0.5) * 0.38, [rep.cohort(n) for n in names], 0.38,
                   label=label, color=color)
        ax.set_xticks(x, names)
        ax.set_ylim(0, 105)
        ax.set_ylabel("precision (%)")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_sweep(rows: Sequence[dict], path) -> None:
    """Absolute change over baseline against repulsion factor, one line per cohort."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for name, _ in COHORTS:
            pts = sorted((r["f"], r["abs_change"]) for r in rows if r["cohort"] == name)
            if pts:
                fs, deltas = zip(*pts)
                ax.plot(fs, deltas, marker="o", label=name)
        ax.axhline(0.0, color="0.6", linewidth=0.8)
        ax.set_xscale("log")
        ax.set_xlabel("repulsion factor f")
        ax.set_ylabel("change over baseline (pp)")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_losses(history: Sequence[dict], path) -> None:
    columns = ("loss_rec", "loss_kl", "loss_cls")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(columns), figsize=(9.0, 2.6))
        step = np.arange(1, len(history) + 1)
        for ax, col in zip(axes, columns):
            ax.plot(step, [float(r[col]) for r in history], linewidth=0.7)
            ax.set_title(col)
            ax.set_xlabel("logged step")
        _save(fig, path)
