"""Figure rendering for evaluation runs.

Writes PNGs next to the JSON report: the stage confusion matrix, a
predicted-vs-true age scatter, and per-stage MAE bars.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport
from .staging import STAGE_NAMES


def _save(fig, path: Path):
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def confusion_figure(report: EvalReport, path: Path):
    counts = np.asarray(report.confusion)
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    im = ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(STAGE_NAMES)), STAGE_NAMES, rotation=45, ha="right")
    ax.set_yticks(range(len(STAGE_NAMES)), STAGE_NAMES)
    ax.set_xlabel("predicted stage")
    ax.set_ylabel("true stage")
    ax.set_title(f"stage confusion ({report.mode}, acc {report.accuracy:.2%})")
    thresh = counts.max() / 2 if counts.max() else 0.5
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > thresh else "black", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    _save(fig, path)


def scatter_figure(age_pairs, mode: str, path: Path):
    true_ages = np.array([t for t, _ in age_pairs])
    pred_ages = np.array([p for _, p in age_pairs])
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    ax.scatter(true_ages, pred_ages, s=12, alpha=0.6, edgecolors="none")
    lim = (min(true_ages.min(), pred_ages.min()) - 2, max(true_ages.max(), pred_ages.max()) + 2)
    ax.plot(lim, lim, "k--", linewidth=0.8)
    ax.set_xlim(lim)
    ax.set_ylim(lim)
    ax.set_xlabel("true age (years)")
    ax.set_ylabel("predicted age (years)")
    ax.set_title(f"age prediction ({mode})")
    _save(fig, path)


def stage_mae_figure(report: EvalReport, path: Path):
    names = [n for n in STAGE_NAMES if n in report.per_stage]
    maes = [report.per_stage[n]["mae_years"] for n in names]
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.bar(names, maes, color="#4878a8")
    ax.set_ylabel("MAE (years)")
    ax.set_title(f"per-stage MAE ({report.mode})")
    ax.tick_params(axis="x", rotation=30)
    _save(fig, path)


def render_figures(report: EvalReport, age_pairs, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        out_dir / "confusion_matrix.png",
        out_dir / "age_scatter.png",
        out_dir / "stage_mae.png",
    ]
    confusion_figure(report, paths[0])
    scatter_figure(age_pairs, report.mode, paths[1])
    stage_mae_figure(report, paths[2])
    return paths
