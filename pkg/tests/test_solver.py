import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpldf import exceptions
from kpldf.helpers import make_rng
from kpldf.instance import Dataset, KnapsackInstance, LabeledInstance, generate_dataset
from kpldf.solver import brute_force, dantzig_bound, label_dataset, solve_exact

ALPHAS = [0.05 + 0.1 * i for i in range(10)]


def _random_instance(rng, ident):
    n = int(rng.integers(1, 19))
    weights = rng.random(n)
    values = rng.random(n)
    capacity = ALPHAS[ident % len(ALPHAS)] * math.fsum(weights)
    return KnapsackInstance(ident, weights, values, capacity)


def _feasible(instance, selection):
    return math.fsum(instance.weights[selection.astype(bool)]) <= instance.capacity + 1e-12


def test_item_cannot_fit():
    for solve in (solve_exact, brute_force):
        result = solve(KnapsackInstance(0, [0.5], [0.9], 0.4))
        assert result.selection.tolist() == [0]
        assert result.objective == 0.0


def test_only_one_fits():
    for solve in (solve_exact, brute_force):
        result = solve(KnapsackInstance(0, [0.3, 0.3], [0.5, 0.6], 0.3))
        assert result.selection.tolist() == [0, 1]
        assert result.objective == 0.6


def test_single_item_fits():
    for solve in (solve_exact, brute_force):
        result = solve(KnapsackInstance(0, [0.1], [0.2], 1.0))
        assert result.selection.tolist() == [1]
        assert result.objective == 0.2


def test_all_items_too_heavy():
    instance = KnapsackInstance(0, [0.8, 0.9, 0.7], [0.1, 0.2, 0.3], 0.5)
    for solve in (solve_exact, brute_force):
        result = solve(instance)
        assert result.selection.tolist() == [0, 0, 0]
        assert result.objective == 0.0


def test_ties_pick_lexicographically_smallest():
    instance = KnapsackInstance(0, [0.3, 0.3, 0.3], [0.5, 0.5, 0.5], 0.6)
    for solve in (solve_exact, brute_force):
        assert solve(instance).selection.tolist() == [0, 1, 1]


def test_zero_value_items_left_out():
    instance = KnapsackInstance(0, [0.1, 0.1], [0.0, 0.4], 1.0)
    for solve in (solve_exact, brute_force):
        assert solve(instance).selection.tolist() == [0, 1]


def test_matches_brute_force():
    rng = make_rng(20240101)
    for ident in range(200):
        instance = _random_instance(rng, ident)
        exact = solve_exact(instance)
        oracle = brute_force(instance)
        assert exact.objective == oracle.objective, ident
        np.testing.assert_array_equal(exact.selection, oracle.selection)
        assert _feasible(instance, exact.selection)
        assert exact.objective == math.fsum(instance.values[exact.selection.astype(bool)])


def test_capacity_on_a_subset_sum():
    rng = make_rng(31)
    for ident in range(600):
        n = int(rng.integers(1, 15))
        weights = np.round(rng.random(n), 1)
        values = np.round(rng.random(n), 4)
        subset = rng.random(n) < 0.5
        instance = KnapsackInstance(ident, weights, values, math.fsum(weights[subset]))
        exact = solve_exact(instance)
        oracle = brute_force(instance)
        assert exact.objective == oracle.objective, ident
        np.testing.assert_array_equal(exact.selection, oracle.selection)
        assert instance.fits(exact.selection)
        assert exact.objective >= math.fsum(values[subset])


def test_tenths_summing_to_capacity():
    instance = KnapsackInstance(0, [0.1, 0.2, 0.4], [0.3, 0.3, 0.5], 0.7)
    assert instance.fits(np.array([1, 1, 1]))
    for solve in (solve_exact, brute_force):
        result = solve(instance)
        assert result.selection.tolist() == [1, 1, 1]
        assert result.objective == math.fsum([0.3, 0.3, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_root_bound_is_sound(seed):
    instance = _random_instance(make_rng(seed), seed)
    assert dantzig_bound(instance) >= solve_exact(instance).objective - 1e-12


def test_deterministic():
    instance = _random_instance(make_rng(5), 3)
    first, second = solve_exact(instance), solve_exact(instance)
    np.testing.assert_array_equal(first.selection, second.selection)
    assert first.nodes_explored == second.nodes_explored


def test_larger_instance_is_feasible():
    dataset = generate_dataset(n_items=100, n_instances=5, seed=8)
    for item in dataset.items:
        result = solve_exact(item.instance)
        assert _feasible(item.instance, result.selection)
        assert result.objective <= dantzig_bound(item.instance) + 1e-12


def test_negative_capacity_rejected():
    with pytest.raises(exceptions.InvariantError):
        solve_exact(KnapsackInstance(2, [0.5], [0.5], -0.1))


def test_node_limit():
    instance = KnapsackInstance(0, [0.4, 0.5, 0.3, 0.6], [0.5, 0.6, 0.3, 0.7], 0.9)
    with pytest.raises(exceptions.SolverLimitError):
        solve_exact(instance, node_limit=1)


def test_brute_force_size_guard():
    instance = KnapsackInstance(0, np.full(26, 0.5), np.full(26, 0.5), 1.0)
    with pytest.raises(exceptions.InstanceTooLargeError):
        brute_force(instance)


def test_label_dataset_matches_brute_force():
    dataset = label_dataset(generate_dataset(n_items=15, n_instances=20, seed=4))
    assert dataset.is_labeled
    for item in dataset.items:
        item.validate()
        oracle = brute_force(item.instance)
        assert item.optimal_value == oracle.objective
        np.testing.assert_array_equal(item.label, oracle.selection)


def test_label_single_instance():
    dataset = label_dataset(generate_dataset(n_items=6, n_instances=1, seed=0))
    result = solve_exact(dataset.items[0].instance)
    np.testing.assert_array_equal(dataset.items[0].label, result.selection)
    assert dataset.items[0].optimal_value == result.objective


def test_label_dataset_is_idempotent(small_dataset):
    again = label_dataset(small_dataset)
    assert again.items == small_dataset.items
    assert again.split == small_dataset.split


def test_parallel_labeling_keeps_order():
    dataset = generate_dataset(n_items=10, n_instances=12, seed=6)
    assert label_dataset(dataset, workers=2).items == label_dataset(dataset).items


def test_label_errors_name_instance():
    bad = LabeledInstance(KnapsackInstance(9, [0.5], [0.5], -1.0))
    with pytest.raises(exceptions.InvariantError, match="instance 9"):
        label_dataset(Dataset(1, None, [bad]))
