import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpldf import exceptions
from kpldf.evaluation import (QUINTILE_LABELS, approximation_ratio, evaluate,
                              evaluate_selections, mu_loss, objective_stats, quintile,
                              select_model, validation_metrics, violation_stats)
from kpldf.instance import KnapsackInstance, LabeledInstance, encode_inputs
from kpldf.nn import bce_loss, init_params


def _single(weights, capacity, values=None, ident=0):
    values = values if values is not None else [0.5] * len(weights)
    return KnapsackInstance(ident, weights, values, capacity)


@pytest.mark.parametrize("predicted,optimal,expected", [
    (7.3, 7.3, 1.0),
    (5.0, 0.0, 2.0),
    (10.0, 5.0, 2.0),
    (0.0, 5.0, 2.0),
    (0.0, 0.0, 1.0),
    (4.0, 5.0, 1.25),
])
def test_approximation_ratio(predicted, optimal, expected):
    assert approximation_ratio(predicted, optimal) == expected


@pytest.mark.parametrize("predicted,optimal", [(-1.0, 1.0), (1.0, -0.5), (math.nan, 1.0)])
def test_approximation_ratio_domain(predicted, optimal):
    with pytest.raises(exceptions.DomainError):
        approximation_ratio(predicted, optimal)


@settings(max_examples=100)
@given(st.floats(0.0, 1e6), st.floats(0.0, 1e6))
def test_approximation_ratio_at_least_one(predicted, optimal):
    ratio = approximation_ratio(predicted, optimal)
    assert ratio >= 1.0
    if predicted == optimal:
        assert ratio == 1.0


def _mu_batch():
    logits = np.array([[0.0, 0.0], [2.0, -1.0]])
    rounded = np.array([[1.0, 1.0], [1.0, 0.0]])
    labels = np.array([[1.0, 0.0], [1.0, 0.0]])
    weights = np.array([[0.5, 0.75], [0.5, 0.5]])
    return logits, rounded, labels, weights


def test_mu_loss_parts():
    logits, rounded, labels, weights = _mu_batch()
    capacities = np.array([1.0, 1.0])
    bce, _ = bce_loss(logits, labels)
    assert mu_loss(logits, rounded, labels, weights, capacities, mu=0.0) == bce
    assert mu_loss(logits, rounded, labels, weights, capacities, mu=1.0) == pytest.approx(
        bce + 0.25 / 2, abs=1e-12)


def test_mu_loss_without_violation():
    logits, rounded, labels, weights = _mu_batch()
    capacities = np.array([2.0, 2.0])
    bce, _ = bce_loss(logits, labels)
    assert mu_loss(logits, rounded, labels, weights, capacities, mu=7.0) == bce


def test_mu_loss_increases_with_mu():
    logits, rounded, labels, weights = _mu_batch()
    capacities = np.array([1.0, 1.0])
    values = [mu_loss(logits, rounded, labels, weights, capacities, mu) for mu in (0, 0.5, 1, 2)]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_violation_stats_none_violated():
    instances = [_single([0.5, 0.5], 0.5)]
    assert violation_stats([np.array([1, 0])], instances) == (0.0, None)


def test_violation_stats_single():
    instances = [_single([1.5], 1.0)]
    assert violation_stats([np.array([1])], instances) == (100.0, 50.0)


def test_violation_stats_outlier_filter():
    instances = [_single([1.01], 1.0, ident=i) for i in range(49)]
    instances.append(_single([11.0], 1.0, ident=49))
    selections = [np.array([1])] * 50
    pct_violated, mean = violation_stats(selections, instances)
    assert pct_violated == 100.0
    assert mean == pytest.approx(1.0, rel=1e-9)

    kept = instances[:9] + [_single([1.02], 1.0, ident=9)]
    assert violation_stats(selections[:10], kept)[1] == pytest.approx(1.1, rel=1e-9)


def test_violation_stats_zero_capacity():
    instances = [_single([0.5], 0.0), _single([2.0], 1.0)]
    assert violation_stats([np.array([1]), np.array([1])], instances) == (100.0, 100.0)
    assert violation_stats([np.array([0]), np.array([0])], instances) == (0.0, None)


def test_violation_stats_zero_capacity_any_item_chosen():
    instances = [_single([0.0, 0.5], 0.0, ident=0), _single([0.25], 0.5, ident=1)]
    selections = [np.array([1, 0]), np.array([1])]
    assert violation_stats(selections, instances) == (50.0, None)


def test_objective_stats_exact():
    instances = [_single([0.5, 0.5], 1.0, values=[0.25, 0.5])]
    assert objective_stats([np.array([1, 1])], [0.75], instances) == (0.0, 0.0, None, None)


def test_objective_stats_single_under():
    instances = [_single([1.0, 1.0], 2.0, values=[9.0, 1.0])]
    assert objective_stats([np.array([1, 0])], [10.0], instances) == (100.0, 0.0, 10.0, None)


def test_objective_stats_mixed():
    instances = [
        _single([0.5, 0.5], 0.5, values=[4.0, 8.0], ident=0),
        _single([0.5, 0.5], 0.5, values=[4.0, 8.0], ident=1),
        _single([0.5, 0.5], 0.5, values=[4.0, 8.0], ident=2),
        _single([0.5, 0.5], 0.5, values=[4.0, 8.0], ident=3),
    ]
    selections = [np.array(s) for s in ([1, 0], [0, 1], [1, 1], [0, 0])]
    optima = [8.0, 8.0, 8.0, 8.0]
    pct_under, pct_over, under, over = objective_stats(selections, optima, instances)
    assert pct_under == 50.0
    assert pct_over == 25.0
    assert under == 75.0
    assert over == 50.0


def test_objective_stats_zero_optimum_left_out():
    instances = [_single([0.5], 0.0, values=[0.5])]
    assert objective_stats([np.array([1])], [0.0], instances) == (0.0, 100.0, None, None)


def _labeled(small_dataset, split="test"):
    return small_dataset.subset(split)


def test_perfect_predictor(small_dataset):
    items = small_dataset.items
    report = evaluate_selections([item.label for item in items], items)
    for row in report.rows:
        if row.count == 0:
            continue
        assert row.ar == 1.0
        assert row.pct_violated == 0.0
        assert row.mean_violation_pct is None
        assert row.pct_under == 0.0 and row.pct_over == 0.0


def test_all_ones_predictor(small_dataset):
    items = small_dataset.items
    report = evaluate_selections([np.ones(small_dataset.n_items, dtype=np.int8)] * len(items),
                                 items)
    for row in report.per_quintile:
        if row.count:
            assert row.pct_violated == 100.0


def test_quintile_partition(small_dataset):
    items = small_dataset.items
    report = evaluate_selections([item.label for item in items], items)
    assert [row.label for row in report.per_quintile] == list(QUINTILE_LABELS)
    assert report.overall.label == "All"
    assert sum(report.counts) == report.overall.count == len(items)
    for item in items:
        assert 0 <= quintile(item.instance) <= 4


@pytest.mark.parametrize("capacity,expected", [
    (0.0, 0), (0.19, 0), (0.2, 1), (0.5, 2), (0.79, 3), (0.8, 4), (1.0, 4)])
def test_quintile_boundaries(capacity, expected):
    assert quintile(_single([0.5, 0.5], capacity)) == expected


def test_empty_quintile_row():
    item = LabeledInstance(_single([0.5, 0.5], 0.5), [1, 0], 0.5)
    report = evaluate_selections([np.array([1, 0])], [item])
    empty = report.per_quintile[0]
    assert empty.count == 0
    assert empty.ar is None and empty.pct_violated is None
    assert report.per_quintile[2].count == 1
    assert "N/A" in report.format_table()


def test_report_rendering(small_dataset):
    items = small_dataset.items
    report = evaluate_selections([item.label for item in items], items)
    table = report.format_table().splitlines()
    assert len(table) == 7
    assert table[0].split()[:2] == ["alpha", "n"]
    assert table[-1].split()[0] == "All"
    payload = json.loads(json.dumps(report.to_dict()))
    assert len(payload["rows"]) == 6
    assert payload["rows"][-1]["count"] == len(items)


def test_evaluate_rejects_unlabeled():
    item = LabeledInstance(_single([0.5, 0.5], 0.5))
    with pytest.raises(exceptions.InvariantError):
        evaluate_selections([np.array([1, 0])], [item])


def test_evaluate_is_deterministic(small_dataset):
    params = init_params(small_dataset.n_items, 0, (16, 16))
    items = _labeled(small_dataset)
    first = evaluate(params, items).to_dict()
    second = evaluate(params, items).to_dict()
    assert first == second
    assert first["rows"][-1]["ar"] >= 1.0


def test_validation_metrics(small_dataset):
    params = init_params(small_dataset.n_items, 0, (16, 16))
    batch = encode_inputs(_labeled(small_dataset, "val"))
    metrics = validation_metrics(params, batch, mu=1.0, batch_size=4)
    assert set(metrics) == {"ar", "mu_loss", "violation_rate"}
    assert metrics["ar"] >= 1.0
    assert 0.0 <= metrics["violation_rate"] <= 1.0
    whole = validation_metrics(params, batch, mu=1.0, batch_size=1024)
    assert whole["ar"] == pytest.approx(metrics["ar"], rel=1e-12)
    assert whole["mu_loss"] == pytest.approx(metrics["mu_loss"], rel=1e-12)


def test_select_model():
    logs = [{"epoch": i, "val_ar": v} for i, v in enumerate([1.3, 1.2, 1.1])]
    assert select_model(logs, "ar") == 2
    assert select_model(logs[:1], "ar") == 0


def test_select_model_ties_pick_earliest():
    logs = [{"epoch": i, "val_mu_loss": 1.0} for i in range(30)]
    logs[10]["val_mu_loss"] = logs[20]["val_mu_loss"] = 0.5
    assert select_model(logs, "mu_loss") == 10


@pytest.mark.parametrize("logs,criterion", [
    ([{"epoch": 0, "val_ar": 1.1}], "mu_loss"),
    ([], "ar"),
    ([{"epoch": 0, "val_ar": 1.1}], "accuracy"),
])
def test_select_model_missing_metric(logs, criterion):
    with pytest.raises(exceptions.MissingMetricError):
        select_model(logs, criterion)
