import json

import numpy as np
import pytest

from brainage import metrics
from brainage.errors import ContractError, DataError
from brainage.metrics import (
    EvalReport,
    adjacency_violations,
    build_report,
    compute_confusion,
    compute_mae_std,
    render_report,
    report_from_json,
    report_to_json,
)
from brainage.staging import STAGE_NAMES, stage_of


def test_mae_direct():
    per_stage, overall = compute_mae_std([(1.0, 1.0), (3.0, 2.0), (5.0, 3.0)])
    assert overall["mae_years"] == pytest.approx(1.0)


def test_mae_perfect():
    _, overall = compute_mae_std([(10.0, 10.0), (20.0, 20.0)])
    assert overall["mae_years"] == 0.0
    assert overall["std_years"] == 0.0


def test_std_population_convention():
    # errors -1 and +1: MAE 1, population STD 1 (sample STD would be sqrt(2))
    _, overall = compute_mae_std([(10.0, 9.0), (10.0, 11.0)])
    assert overall["mae_years"] == pytest.approx(1.0)
    assert overall["std_years"] == pytest.approx(1.0)


def test_mae_grouping_by_true_stage():
    pairs = [(0.5, 0.4), (1.0, 1.3), (70.0, 75.0)]
    per_stage, overall = compute_mae_std(pairs)
    assert set(per_stage) == {"infant", "elderly"}  # empty stages omitted
    assert per_stage["infant"]["n"] == 2
    assert per_stage["elderly"]["mae_years"] == pytest.approx(5.0)
    assert overall["n"] == 3


def test_mae_empty_is_data_error():
    with pytest.raises(DataError):
        compute_mae_std([])


def test_confusion_all_correct():
    items = [(s, s) for s in range(6)] * 2
    confusion, accuracy = compute_confusion(items)
    assert accuracy == 1.0
    assert np.array_equal(np.asarray(confusion), np.eye(6, dtype=int) * 2)


def test_confusion_counting_modes_denominators():
    # 4 subjects x 3 modalities solo vs 4 fused items
    solo_items = [(0, 0)] * 12
    fused_items = [(0, 0)] * 4
    assert np.asarray(compute_confusion(solo_items)[0]).sum() == 12
    assert np.asarray(compute_confusion(fused_items)[0]).sum() == 4


def test_confusion_one_error_fixture():
    items = [(0, 0), (1, 1), (2, 2), (3, 4)]
    confusion, accuracy = compute_confusion(items)
    assert accuracy == 0.75
    assert confusion[3][4] == 1


def test_confusion_invalid_stage():
    with pytest.raises(ContractError):
        compute_confusion([(0, 6)])


def test_adjacency_identity():
    assert adjacency_violations(np.eye(6, dtype=int) * 5) == 0


def test_adjacency_neonatal_to_adult():
    m = np.zeros((6, 6), dtype=int)
    m[1, 4] = 1
    assert adjacency_violations(m) == 1


def test_adjacency_child_to_adult_is_neighbor():
    m = np.zeros((6, 6), dtype=int)
    m[3, 4] = 1
    assert adjacency_violations(m) == 0


def test_evaluator_matches_bruteforce_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(5, 60))
        truths = rng.uniform(-0.4, 100.0, size=n)
        preds = truths + rng.normal(0, 5.0, size=n)
        pairs = list(zip(truths, preds))
        per_stage, overall = compute_mae_std(pairs)

        errors = preds - truths
        assert overall["mae_years"] == pytest.approx(np.mean(np.abs(errors)), abs=1e-12)
        assert overall["std_years"] == pytest.approx(np.std(errors), abs=1e-12)
        for name, entry in per_stage.items():
            sel = np.array([stage_of(t).name == name for t in truths])
            assert entry["n"] == int(sel.sum())
            assert entry["mae_years"] == pytest.approx(np.mean(np.abs(errors[sel])), abs=1e-12)
            assert entry["std_years"] == pytest.approx(np.std(errors[sel]), abs=1e-12)

        true_ids = rng.integers(0, 6, size=n)
        pred_ids = rng.integers(0, 6, size=n)
        confusion, accuracy = compute_confusion(list(zip(true_ids, pred_ids)))
        ref = np.zeros((6, 6), dtype=int)
        for t, p in zip(true_ids, pred_ids):
            ref[t, p] += 1
        assert np.array_equal(np.asarray(confusion), ref)
        assert accuracy == pytest.approx(np.trace(ref) / n, abs=1e-15)
        assert np.asarray(confusion).sum() == n


def test_render_report_formatting():
    report = build_report(
        age_pairs=[(0.5, 0.5149), (0.6, 0.6)],
        stage_items=[(2, 2), (2, 2)],
        mode="per_subject",
    )
    report.per_stage["infant"]["mae_years"] = 0.0149
    text = render_report(report)
    assert "0.01" in text
    assert "--" in text  # stages without samples
    assert "per_subject" in text


def test_report_json_roundtrip(rng):
    truths = rng.uniform(-0.4, 100.0, size=25)
    preds = truths + rng.normal(0, 2, size=25)
    items = [(stage_of(t).id, int(rng.integers(0, 6))) for t in truths]
    report = build_report(list(zip(truths, preds)), items, "per_modality")
    text = report_to_json(report)
    parsed = report_from_json(text)
    assert parsed == report
    doc = json.loads(text)
    assert [row["name"] for row in doc["stage_table"]] == list(STAGE_NAMES)


def test_report_inputs_modes():
    rows = [{
        "subject_id": "s0", "session_id": "ses-01", "true_age": 10.0,
        "predicted_stage": "child", "fused_age": 11.0,
        "modalities": ("T1w", "FA"),
        "per_modality_age": {"T1w": 10.5, "FA": 11.5},
        "solo_stages": {"T1w": "child", "FA": "adult"},
    }]
    pairs, items = metrics.report_inputs_from_predictions(rows, "per_subject")
    assert pairs == [(10.0, 11.0)]
    assert items == [(3, 3)]
    pairs, items = metrics.report_inputs_from_predictions(rows, "per_modality")
    assert pairs == [(10.0, 10.5), (10.0, 11.5)]
    assert items == [(3, 3), (3, 4)]
    with pytest.raises(ContractError):
        metrics.report_inputs_from_predictions(rows, "fused")


def test_figures_render(tmp_path, rng):
    truths = rng.uniform(-0.4, 100.0, size=30)
    preds = truths + rng.normal(0, 3, size=30)
    pairs = list(zip(truths, preds))
    items = [(stage_of(t).id, stage_of(t).id) for t in truths]
    report = build_report(pairs, items, "per_subject")
    from brainage.figures import render_figures
    paths = render_figures(report, pairs, tmp_path)
    assert [p.name for p in paths] == ["confusion_matrix.png", "age_scatter.png", "stage_mae.png"]
    for p in paths:
        assert p.exists() and p.stat().st_size > 1000
