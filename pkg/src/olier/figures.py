"""Figure rendering for run reports.

Every CLI command that writes a delimited table also drops the matching
figures next to it; all rendering targets files through the Agg backend.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .fisher import FisherReport
from .training import AccuracyMatrix, StreamResult, average_accuracy

_DPI = 150


def accuracy_matrix_figure(matrix: AccuracyMatrix, path: str | Path, title: str = "") -> None:
    """Heatmap of a[i, j]: rows are evaluated tasks, columns the task just trained."""
    t = matrix.task_count
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * t, 0.8 + 0.8 * t))
    masked = np.ma.masked_invalid(matrix.values)
    im = ax.imshow(masked, vmin=0.0, vmax=1.0, cmap="viridis")
    for i in range(t):
        for j in range(i, t):
            v = matrix.values[i, j]
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=8,
                    color="white" if v < 0.6 else "black")
    ax.set_xlabel("after training task")
    ax.set_ylabel("evaluated task")
    ax.set_xticks(range(t))
    ax.set_yticks(range(t))
    label = title or f"accuracy matrix (A_T = {average_accuracy(matrix):.3f})"
    ax.set_title(label, fontsize=10)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def loss_trace_figure(result: StreamResult, path: str | Path) -> None:
    """Per-step task loss and penalty traces, one segment per task."""
    has_penalty = any(any(v != 0.0 for v in log.orth_loss + log.sparse_loss) for log in result.logs)
    rows = 2 if has_penalty else 1
    fig, axes = plt.subplots(rows, 1, figsize=(8, 3 * rows), sharex=True, squeeze=False)
    ax_task = axes[0][0]
    offset = 0
    for log in result.logs:
        steps = np.arange(offset, offset + len(log))
        ax_task.plot(steps, log.task_loss, lw=0.8, label=f"task {log.task_id}")
        if has_penalty:
            penalty = np.array(log.orth_loss) + np.array(log.sparse_loss)
            axes[1][0].plot(steps, penalty, lw=0.8)
        offset += len(log)
        ax_task.axvline(offset, color="grey", lw=0.5, alpha=0.5)
    ax_task.set_ylabel("task loss")
    ax_task.set_yscale("log")
    ax_task.legend(fontsize=7, ncol=min(len(result.logs), 5))
    if has_penalty:
        axes[1][0].set_ylabel("penalty (unweighted)")
        axes[1][0].set_xlabel("optimization step")
    else:
        ax_task.set_xlabel("optimization step")
    ax_task.set_title(f"{result.config.method}, seed {result.config.seed}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def taylor_ablation_figure(rows: list[tuple[int, int, float]], path: str | Path) -> None:
    """A_T against expansion order; one light line per seed plus the mean."""
    orders = sorted({r[0] for r in rows})
    seeds = sorted({r[1] for r in rows})
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for seed in seeds:
        ys = [next(a for o, s, a in rows if o == order and s == seed) for order in orders]
        ax.plot(orders, ys, "o-", color="steelblue", alpha=0.35, lw=0.8, ms=3)
    means = [float(np.mean([a for o, _, a in rows if o == order])) for order in orders]
    ax.plot(orders, means, "o-", color="crimson", lw=2, label="mean over seeds")
    ax.set_xticks(orders)
    ax.set_xlabel("Taylor expansion order")
    ax.set_ylabel("average accuracy A_T")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def mult_ablation_figure(rows: list[tuple[int, float, float]], path: str | Path) -> None:
    """Paired bars per seed: multiplicative versus additive updates."""
    seeds = [r[0] for r in rows]
    x = np.arange(len(seeds))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.5 + 0.9 * len(seeds), 3.5))
    ax.bar(x - width / 2, [r[1] for r in rows], width, label="multiplicative", color="steelblue")
    ax.bar(x + width / 2, [r[2] for r in rows], width, label="additive", color="darkorange")
    ax.set_xticks(x)
    ax.set_xticklabels([str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("average accuracy A_T")
    mean_delta = float(np.mean([r[1] - r[2] for r in rows]))
    ax.set_title(f"update-rule ablation (mean delta = {mean_delta:+.4f})", fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def fisher_energy_figure(report: FisherReport, path: str | Path) -> None:
    """Per-layer contribution to the Fisher-weighted energy."""
    # Recomputing the per-layer split needs the deltas, which the report does
    # not carry; show the Fisher mass per layer instead.
    masses = [float(f.sum()) for f in report.fisher]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar(range(len(masses)), masses, color="seagreen")
    ax.set_xticks(range(len(masses)))
    ax.set_xticklabels([f"layer {i}" for i in range(len(masses))])
    ax.set_ylabel("sum of diagonal Fisher entries")
    ax.set_title(f"E = {report.energy:.6g} ({report.metadata.get('method', '?')})", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
