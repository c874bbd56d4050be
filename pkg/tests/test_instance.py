import json
import math
import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpldf import exceptions
from kpldf.instance import (Dataset, KnapsackInstance, LabeledInstance, alpha, encode_inputs,
                            generate_dataset, read_dataset, split_sizes, write_dataset)


def _write_lines(path, header, records):
    with open(path, "w", encoding="utf-8") as fp:
        fp.write(json.dumps(header) + "\n")
        for record in records:
            fp.write(json.dumps(record) + "\n")


def _header(n_items, n_instances, ids=()):
    return {"format": "kpds", "version": 1, "n_items": n_items, "n_instances": n_instances,
            "seed": None, "split": {"train": list(ids), "val": [], "test": []}}


def test_capacity_law():
    dataset = generate_dataset(n_items=20, n_instances=50, seed=3)
    for item in dataset.items:
        j = item.id + 1
        total = math.fsum(item.instance.weights)
        assert abs(item.instance.capacity - j / 51 * total) <= 1e-12 * total


def test_capacity_fraction_increases_with_index():
    dataset = generate_dataset(n_items=5, n_instances=40, seed=0)
    fractions = [alpha(dataset.get(i).instance) for i in range(40)]
    assert all(a < b for a, b in zip(fractions, fractions[1:]))
    assert 0.0 < fractions[0] and fractions[-1] < 1.0


def test_uniform_item_means():
    dataset = generate_dataset(n_items=100, n_instances=100, seed=5)
    weights = np.concatenate([item.instance.weights for item in dataset.items])
    values = np.concatenate([item.instance.values for item in dataset.items])
    assert weights.size == 10 ** 4
    assert abs(weights.mean() - 0.5) < 0.01
    assert abs(values.mean() - 0.5) < 0.01
    assert weights.min() >= 0.0 and weights.max() <= 1.0


def test_generation_is_deterministic(tmp_path):
    first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_dataset(generate_dataset(6, 30, seed=42), str(first))
    write_dataset(generate_dataset(6, 30, seed=42), str(second))
    assert first.read_bytes() == second.read_bytes()
    write_dataset(generate_dataset(6, 30, seed=43), str(second))
    assert first.read_bytes() != second.read_bytes()


def test_split_partitions_ids():
    dataset = generate_dataset(n_items=3, n_instances=300, seed=1)
    train, val, test = (dataset.split[name] for name in ("train", "val", "test"))
    assert (len(train), len(val), len(test)) == (240, 30, 30)
    assert sorted(train + val + test) == list(range(300))
    assert train == sorted(train)


def test_default_split_sizes():
    assert split_sizes(30000) == (24000, 3000, 3000)
    assert split_sizes(4000) == (3200, 400, 400)


def test_split_covers_all_capacities():
    dataset = generate_dataset(n_items=4, n_instances=1000, seed=9)
    fractions = [alpha(item.instance) for item in dataset.subset("test")]
    assert min(fractions) < 0.2 and max(fractions) >= 0.8


def test_generated_instances_validate():
    dataset = generate_dataset(n_items=10, n_instances=20, seed=2)
    for item in dataset.items:
        item.instance.validate(generated=True)


@pytest.mark.parametrize("n_items,n_instances", [(0, 5), (5, 0)])
def test_generate_rejects_empty(n_items, n_instances):
    with pytest.raises(exceptions.ConfigError):
        generate_dataset(n_items, n_instances, seed=0)


@pytest.mark.parametrize("weights,capacity,expected", [
    ([1.0, 1.0], 1.0, 0.5),
    ([1.0, 1.0], 0.0, 0.0),
    ([0.25, 0.5], 0.75, 1.0),
])
def test_alpha(weights, capacity, expected):
    assert alpha(KnapsackInstance(0, weights, [0.5, 0.5], capacity)) == expected


def test_alpha_zero_total_weight():
    with pytest.raises(exceptions.DomainError):
        alpha(KnapsackInstance(0, [0.0, 0.0], [0.5, 0.5], 0.0))


def test_round_trip(tmp_path, small_dataset):
    path = str(tmp_path / "data.jsonl")
    write_dataset(small_dataset, path)
    loaded = read_dataset(path)
    assert loaded.n_items == small_dataset.n_items
    assert loaded.seed == small_dataset.seed
    assert loaded.split == small_dataset.split
    assert loaded.items == small_dataset.items


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2 ** 63 - 1))
def test_round_trip_unlabeled(n_items, n_instances, seed):
    dataset = generate_dataset(n_items, n_instances, seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "data.jsonl")
        write_dataset(dataset, path)
        loaded = read_dataset(path)
    assert loaded.items == dataset.items
    assert loaded.split == dataset.split
    assert not loaded.is_labeled


def test_empty_dataset_is_header_only(tmp_path):
    path = tmp_path / "empty.jsonl"
    write_dataset(Dataset(n_items=2, seed=None), str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["n_instances"] == 0
    assert read_dataset(str(path)).items == []


def test_single_instance_line(tmp_path):
    path = tmp_path / "one.jsonl"
    item = LabeledInstance(KnapsackInstance(0, [0.25, 0.5], [0.5, 0.75], 0.5), [0, 1], 0.75)
    write_dataset(Dataset(2, 1, [item], {"train": [0], "val": [], "test": []}), str(path))
    record = json.loads(path.read_text(encoding="utf-8").splitlines()[1])
    assert record == {"id": 0, "w": [0.25, 0.5], "v": [0.5, 0.75], "W": 0.5, "x": [0, 1],
                      "opt": 0.75}


def test_length_mismatch_names_instance(tmp_path):
    path = str(tmp_path / "bad.jsonl")
    _write_lines(path, _header(2, 1), [{"id": 7, "w": [0.1, 0.2], "v": [0.3], "W": 0.1}])
    with pytest.raises(exceptions.InvariantError, match="instance 7"):
        read_dataset(path)


def test_infeasible_label(tmp_path):
    path = str(tmp_path / "bad.jsonl")
    record = {"id": 4, "w": [0.6, 0.6], "v": [0.5, 0.5], "W": 0.7, "x": [1, 1], "opt": 1.0}
    _write_lines(path, _header(2, 1), [record])
    with pytest.raises(exceptions.InfeasibleLabelError, match="infeasible label"):
        read_dataset(path)


def test_wrong_optimal_value(tmp_path):
    path = str(tmp_path / "bad.jsonl")
    record = {"id": 0, "w": [0.6, 0.6], "v": [0.5, 0.5], "W": 0.7, "x": [1, 0], "opt": 0.6}
    _write_lines(path, _header(2, 1), [record])
    with pytest.raises(exceptions.InvariantError, match="instance 0"):
        read_dataset(path)


@pytest.mark.parametrize("record,field", [
    ({"id": 0, "v": [0.1], "W": 0.1}, "'w'"),
    ({"id": 0, "w": [0.1], "v": ["a"], "W": 0.1}, "'v'"),
    ({"id": 0, "w": [0.1], "v": [0.1], "W": "x"}, "'W'"),
    ({"id": 0, "w": [0.1], "v": [0.1], "W": 0.1, "x": [2]}, "'x'"),
    ({"id": -1, "w": [0.1], "v": [0.1], "W": 0.1}, "'id'"),
])
def test_malformed_record_names_line_and_field(tmp_path, record, field):
    path = str(tmp_path / "bad.jsonl")
    _write_lines(path, _header(1, 1), [record])
    with pytest.raises(exceptions.FormatError, match="line 2: .*%s" % field):
        read_dataset(path)


def test_bad_header(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"format": "csv", "version": 1}\n', encoding="utf-8")
    with pytest.raises(exceptions.FormatError, match="line 1"):
        read_dataset(str(path))


def test_instance_count_mismatch(tmp_path):
    path = str(tmp_path / "bad.jsonl")
    _write_lines(path, _header(1, 2), [{"id": 0, "w": [0.1], "v": [0.1], "W": 0.1}])
    with pytest.raises(exceptions.FormatError, match="n_instances"):
        read_dataset(path)


def test_unknown_split_id(tmp_path):
    path = str(tmp_path / "bad.jsonl")
    _write_lines(path, _header(1, 1, ids=[3]), [{"id": 0, "w": [0.1], "v": [0.1], "W": 0.1}])
    with pytest.raises(exceptions.InvariantError, match="unknown instance id 3"):
        read_dataset(path)


def test_missing_file(tmp_path):
    with pytest.raises(exceptions.StorageError, match="missing.jsonl"):
        read_dataset(str(tmp_path / "missing.jsonl"))


def test_capacity_above_total_weight():
    with pytest.raises(exceptions.InvariantError):
        KnapsackInstance(1, [0.1, 0.2], [0.1, 0.1], 0.5).validate()


def test_encode_inputs(small_dataset):
    items = small_dataset.subset("val")
    batch = encode_inputs(items)
    n = small_dataset.n_items
    assert batch.inputs.shape == (len(items), 2 * n + 1)
    np.testing.assert_array_equal(batch.inputs[0, :n], items[0].instance.weights)
    np.testing.assert_array_equal(batch.inputs[0, n:2 * n], items[0].instance.values)
    assert batch.inputs[0, -1] == items[0].instance.capacity
    np.testing.assert_array_equal(batch.labels[1], items[1].label)


def test_encode_inputs_unlabeled():
    batch = encode_inputs(generate_dataset(3, 4, seed=0).items)
    assert batch.labels is None
