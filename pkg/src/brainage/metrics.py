"""Evaluation: per-stage MAE/STD tables, stage confusion matrices and
accuracies in per-modality ("solo") and per-subject ("fused") counting
modes, plus the rendered report.

Conventions: regression pairs are grouped by the stage of the TRUE age,
so group membership never depends on the model; STD is the population
standard deviation of signed errors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError
from .staging import N_STAGES, STAGE_NAMES, stage_of, stage_table

EVAL_MODES = ("per_modality", "per_subject")


@dataclass
class EvalReport:
    mode: str
    per_stage: dict[str, dict] = field(default_factory=dict)  # stage name -> {mae_years, std_years, n}
    overall: dict = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=lambda: [[0] * N_STAGES for _ in range(N_STAGES)])
    accuracy: float = 0.0
    adjacency_violations: int = 0
    n_items: int = 0


def _mae_std(errors: np.ndarray) -> dict:
    return {
        "mae_years": float(np.mean(np.abs(errors))),
        "std_years": float(np.std(errors)),  # population convention (ddof=0)
        "n": int(errors.size),
    }


def compute_mae_std(pairs) -> tuple[dict[str, dict], dict]:
    """Per-stage and overall MAE/STD from (true_years, pred_years) pairs.

    Stages with no pairs are omitted, not zero-filled.
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("compute_mae_std needs at least one (true, pred) pair")
    errors = np.array([pred - true for true, pred in pairs], dtype=np.float64)
    stage_ids = np.array([stage_of(true).id for true, _ in pairs])
    per_stage = {}
    for stage_id in range(N_STAGES):
        sel = stage_ids == stage_id
        if np.any(sel):
            per_stage[STAGE_NAMES[stage_id]] = _mae_std(errors[sel])
    return per_stage, _mae_std(errors)


def compute_confusion(items) -> tuple[list[list[int]], float]:
    """6x6 count matrix (rows true, cols predicted) and trace/total accuracy."""
    items = list(items)
    if not items:
        raise DataError("compute_confusion needs at least one (true, predicted) item")
    confusion = np.zeros((N_STAGES, N_STAGES), dtype=np.int64)
    for true_id, pred_id in items:
        if not (0 <= true_id < N_STAGES and 0 <= pred_id < N_STAGES):
            raise ContractError(f"stage ids must be in 0..{N_STAGES - 1}, got ({true_id}, {pred_id})")
        confusion[true_id, pred_id] += 1
    accuracy = float(np.trace(confusion) / confusion.sum())
    return confusion.tolist(), accuracy


def adjacency_violations(confusion) -> int:
    """Count of errors landing two or more stages away from the truth."""
    confusion = np.asarray(confusion)
    if confusion.shape != (N_STAGES, N_STAGES):
        raise ContractError(f"confusion matrix must be {N_STAGES}x{N_STAGES}, got {confusion.shape}")
    i, j = np.indices(confusion.shape)
    return int(confusion[np.abs(i - j) >= 2].sum())


def build_report(age_pairs, stage_items, mode: str) -> EvalReport:
    if mode not in EVAL_MODES:
        raise ContractError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    per_stage, overall = compute_mae_std(age_pairs)
    confusion, accuracy = compute_confusion(stage_items)
    return EvalReport(
        mode=mode,
        per_stage=per_stage,
        overall=overall,
        confusion=confusion,
        accuracy=accuracy,
        adjacency_violations=adjacency_violations(confusion),
        n_items=len(list(stage_items)),
    )


def render_report(report: EvalReport) -> str:
    """Plain-text table; values to 2 decimals, missing stages as
    '--'. Full precision lives in the JSON output."""
    lines = [
        f"mode: {report.mode}   items: {report.n_items}",
        f"stage accuracy: {report.accuracy:.4f}   adjacency violations: {report.adjacency_violations}",
        "",
        f"{'stage':<10} {'n':>6} {'MAE(y)':>8} {'STD(y)':>8}",
    ]
    for name in STAGE_NAMES:
        entry = report.per_stage.get(name)
        if entry is None:
            lines.append(f"{name:<10} {'--':>6} {'--':>8} {'--':>8}")
        else:
            lines.append(f"{name:<10} {entry['n']:>6} {entry['mae_years']:>8.2f} {entry['std_years']:>8.2f}")
    o = report.overall
    lines.append(f"{'overall':<10} {o['n']:>6} {o['mae_years']:>8.2f} {o['std_years']:>8.2f}")
    return "\n".join(lines) + "\n"


def report_to_json(report: EvalReport) -> str:
    doc = {
        "schema_version": 1,
        "mode": report.mode,
        "per_stage": report.per_stage,
        "overall": report.overall,
        "confusion": report.confusion,
        "accuracy": report.accuracy,
        "adjacency_violations": report.adjacency_violations,
        "n_items": report.n_items,
        "stage_table": stage_table(),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> EvalReport:
    doc = json.loads(text)
    return EvalReport(
        mode=doc["mode"],
        per_stage=doc["per_stage"],
        overall=doc["overall"],
        confusion=doc["confusion"],
        accuracy=doc["accuracy"],
        adjacency_violations=doc["adjacency_violations"],
        n_items=doc["n_items"],
    )


# ---------------------------------------------------------------------------
# prediction-row -> report inputs

def report_inputs_from_predictions(rows: list[dict], mode: str):
    """Extract (age_pairs, stage_items) from parsed prediction rows.

    per_subject: one item per subject (fused age, aggregated stage).
    per_modality: one item per (subject, modality) (solo age and argmax).
    """
    if mode == "per_subject":
        age_pairs = [(r["true_age"], r["fused_age"]) for r in rows]
        stage_items = [(stage_of(r["true_age"]).id, STAGE_NAMES.index(r["predicted_stage"])) for r in rows]
    elif mode == "per_modality":
        age_pairs, stage_items = [], []
        for r in rows:
            true_id = stage_of(r["true_age"]).id
            for m in r["modalities"]:
                age_pairs.append((r["true_age"], r["per_modality_age"][m]))
                stage_items.append((true_id, STAGE_NAMES.index(r["solo_stages"][m])))
    else:
        raise ContractError(f"mode must be one of {EVAL_MODES}, got {mode!r}")
    return age_pairs, stage_items
