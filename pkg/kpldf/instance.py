"""Knapsack instances, datasets and the JSON-lines dataset file."""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import exception
from .helpers import spawn_rngs

_LOGGER = logging.getLogger(__name__)

FORMAT_NAME = "kpds"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

# Slack of the capacity check shared by label validation and the solver.
FEASIBILITY_TOL = 1e-12
OBJECTIVE_TOL = 1e-9


@dataclass(eq=False)
class KnapsackInstance:
    """One 0-1 knapsack problem."""

    id: int
    weights: np.ndarray
    values: np.ndarray
    capacity: float

    def __post_init__(self) -> None:
        """Coerce item arrays to float64."""
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.capacity = float(self.capacity)

    @property
    def n_items(self) -> int:
        """Return the number of items."""
        return len(self.weights)

    def fits(self, selection: np.ndarray) -> bool:
        """Return whether a 0/1 selection respects the capacity."""
        chosen = np.asarray(selection).astype(bool)
        return math.fsum(self.weights[chosen]) <= self.capacity + FEASIBILITY_TOL

    def validate(self, generated: bool = False) -> None:
        """Raise InvariantError if the instance is malformed."""
        if self.weights.ndim != 1 or self.values.ndim != 1:
            raise exception(-2, "instance %d: item arrays must be one-dimensional" % self.id)
        if len(self.weights) != len(self.values):
            raise exception(-2, "instance %d: %d weights but %d values" % (
                self.id, len(self.weights), len(self.values)))
        if len(self.weights) < 1:
            raise exception(-2, "instance %d: no items" % self.id)
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.values))):
            raise exception(-2, "instance %d: non-finite item data" % self.id)
        low = 0.0
        high = 1.0 if generated else math.inf
        if np.any(self.weights < low) or np.any(self.weights > high):
            raise exception(-2, "instance %d: weight out of range" % self.id)
        if np.any(self.values < low) or np.any(self.values > high):
            raise exception(-2, "instance %d: value out of range" % self.id)
        total = math.fsum(self.weights)
        if not 0.0 <= self.capacity <= total:
            raise exception(-2, "instance %d: capacity %r outside [0, %r]" % (
                self.id, self.capacity, total))

    def __eq__(self, other: object) -> bool:
        """Compare field for field, bit-exactly."""
        if not isinstance(other, KnapsackInstance):
            return NotImplemented
        return (
            self.id == other.id
            and self.capacity == other.capacity
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.values, other.values)
        )


@dataclass(eq=False)
class LabeledInstance:
    """An instance with its optimal selection, or with an empty label marker."""

    instance: KnapsackInstance
    label: Optional[np.ndarray] = None
    optimal_value: Optional[float] = None

    def __post_init__(self) -> None:
        """Coerce the label to a 0/1 int8 vector."""
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.int8)
        if self.optimal_value is not None:
            self.optimal_value = float(self.optimal_value)

    @property
    def id(self) -> int:
        """Return the instance id."""
        return self.instance.id

    @property
    def is_labeled(self) -> bool:
        """Return True if the optimal selection is known."""
        return self.label is not None

    def validate(self) -> None:
        """Raise InvariantError if the instance or its label is malformed."""
        self.instance.validate()
        if self.label is None and self.optimal_value is None:
            return
        ident = self.instance.id
        if self.label is None or self.optimal_value is None:
            raise exception(-2, "instance %d: label and opt must both be set or both null" % ident)
        if self.label.shape != self.instance.weights.shape:
            raise exception(-2, "instance %d: label has %d entries, expected %d" % (
                ident, self.label.size, self.instance.n_items))
        if np.any((self.label != 0) & (self.label != 1)):
            raise exception(-2, "instance %d: label entries must be 0 or 1" % ident)
        chosen = self.label.astype(bool)
        if not self.instance.fits(chosen):
            raise exception(-3, "instance %d" % ident)
        objective = math.fsum(self.instance.values[chosen])
        if abs(objective - self.optimal_value) > OBJECTIVE_TOL:
            raise exception(-2, "instance %d: opt %r does not match label objective %r" % (
                ident, self.optimal_value, objective))

    def __eq__(self, other: object) -> bool:
        """Compare field for field, bit-exactly."""
        if not isinstance(other, LabeledInstance):
            return NotImplemented
        if (self.label is None) != (other.label is None):
            return False
        if self.label is not None and not np.array_equal(self.label, other.label):
            return False
        return self.instance == other.instance and self.optimal_value == other.optimal_value


@dataclass
class Dataset:
    """An ordered collection of instances with a train/val/test split."""

    n_items: int
    seed: Optional[int]
    items: List[LabeledInstance] = field(default_factory=list)
    split: Dict[str, List[int]] = field(default_factory=lambda: {name: [] for name in SPLITS})

    def __post_init__(self) -> None:
        """Index the items by id."""
        self._by_id = {item.id: item for item in self.items}

    @property
    def is_labeled(self) -> bool:
        """Return True if every instance carries a label."""
        return all(item.is_labeled for item in self.items)

    def get(self, ident: int) -> LabeledInstance:
        """Return the instance with the given id."""
        return self._by_id[ident]

    def subset(self, name: str) -> List[LabeledInstance]:
        """Return the instances of one split, in split order."""
        return [self._by_id[ident] for ident in self.split[name]]

    def validate(self) -> None:
        """Raise InvariantError if ids, sizes or splits are inconsistent."""
        if len(self._by_id) != len(self.items):
            raise exception(-2, "duplicate instance id")
        for item in self.items:
            if item.instance.n_items != self.n_items:
                raise exception(-2, "instance %d: %d items, dataset declares %d" % (
                    item.id, item.instance.n_items, self.n_items))
            item.validate()
        seen = set()
        for name in SPLITS:
            for ident in self.split.get(name, []):
                if ident not in self._by_id:
                    raise exception(-2, "split %s: unknown instance id %d" % (name, ident))
                if ident in seen:
                    raise exception(-2, "split %s: instance id %d appears twice" % (name, ident))
                seen.add(ident)


@dataclass
class Batch:
    """Dense arrays for a batch of instances."""

    inputs: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    capacities: np.ndarray
    labels: Optional[np.ndarray]


def alpha(instance: KnapsackInstance) -> float:
    """Return the capacity relative to the total item weight."""
    total = math.fsum(instance.weights)
    if total <= 0.0:
        raise exception(-106, "instance %d: zero total weight" % instance.id)
    return instance.capacity / total


def encode_inputs(items: Sequence[LabeledInstance]) -> Batch:
    """Stack instances into network inputs [w_1..w_n, v_1..v_n, W]."""
    if not items:
        raise exception(-100, "empty batch")
    weights = np.stack([item.instance.weights for item in items])
    values = np.stack([item.instance.values for item in items])
    capacities = np.array([item.instance.capacity for item in items], dtype=np.float64)
    inputs = np.concatenate([weights, values, capacities[:, None]], axis=1)
    labels = None
    if all(item.is_labeled for item in items):
        labels = np.stack([item.label for item in items]).astype(np.float64)
    return Batch(inputs, weights, values, capacities, labels)


def split_sizes(n_instances: int) -> Tuple[int, int, int]:
    """Return the 80/10/10 split sizes."""
    n_train = n_instances * 8 // 10
    n_val = n_instances // 10
    return n_train, n_val, n_instances - n_train - n_val


def generate_instance(ident: int, n_items: int, n_instances: int,
                      rng: np.random.Generator) -> KnapsackInstance:
    """Generate the instance at zero-based position `ident` of an n_instances run."""
    weights = rng.random(n_items)
    values = rng.random(n_items)
    # Pisinger's capacity law, j is one-based.
    capacity = (ident + 1) / (n_instances + 1) * math.fsum(weights)
    return KnapsackInstance(ident, weights, values, capacity)


def generate_dataset(n_items: int, n_instances: int, seed: int) -> Dataset:
    """Generate an unlabeled dataset of uncorrelated uniform instances."""
    if n_items < 1 or n_instances < 1:
        raise exception(-104, "n_items and n_instances must be positive")
    # One stream per instance plus one for the split shuffle.
    rngs = spawn_rngs(seed, n_instances + 1)
    items = [
        LabeledInstance(generate_instance(ident, n_items, n_instances, rngs[ident]))
        for ident in range(n_instances)
    ]
    order = rngs[-1].permutation(n_instances)
    n_train, n_val, _ = split_sizes(n_instances)
    split = {
        "train": sorted(int(i) for i in order[:n_train]),
        "val": sorted(int(i) for i in order[n_train:n_train + n_val]),
        "test": sorted(int(i) for i in order[n_train + n_val:]),
    }
    _LOGGER.debug("Generated %d instances with %d items (seed %d)", n_instances, n_items, seed)
    return Dataset(n_items, seed, items, split)


def instance_to_record(item: LabeledInstance) -> dict:
    """Return the JSON record of one instance line."""
    return {
        "id": item.id,
        "w": item.instance.weights.tolist(),
        "v": item.instance.values.tolist(),
        "W": item.instance.capacity,
        "x": None if item.label is None else [int(bit) for bit in item.label],
        "opt": item.optimal_value,
    }


def _field(record: dict, name: str, lineno: int):
    """Return a required field of a record."""
    try:
        return record[name]
    except KeyError:
        raise exception(-1, "line %d: missing field %r" % (lineno, name)) from None


def _real_list(record: dict, name: str, lineno: int) -> np.ndarray:
    """Return a list field of numbers as a float64 array."""
    value = _field(record, name, lineno)
    if not isinstance(value, list) or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in value):
        raise exception(-1, "line %d: field %r must be a list of numbers" % (lineno, name))
    return np.array(value, dtype=np.float64)


def _real(record: dict, name: str, lineno: int, nullable: bool = False) -> Optional[float]:
    """Return a numeric field."""
    value = _field(record, name, lineno)
    if value is None and nullable:
        return None
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise exception(-1, "line %d: field %r must be a number" % (lineno, name))
    return float(value)


def record_to_instance(record: dict, lineno: int = 0, default_id: int = 0) -> LabeledInstance:
    """Parse one instance record; `x` and `opt` may be absent or null."""
    if not isinstance(record, dict):
        raise exception(-1, "line %d: expected a JSON object" % lineno)
    ident = record.get("id", default_id)
    if not isinstance(ident, int) or isinstance(ident, bool) or ident < 0:
        raise exception(-1, "line %d: field 'id' must be a non-negative integer" % lineno)
    weights = _real_list(record, "w", lineno)
    values = _real_list(record, "v", lineno)
    capacity = _real(record, "W", lineno)
    label = record.get("x")
    if label is not None:
        if not isinstance(label, list) or not all(
                isinstance(bit, int) and not isinstance(bit, bool) and bit in (0, 1) for bit in label):
            raise exception(-1, "line %d: field 'x' must be a list of 0/1" % lineno)
        label = np.array(label, dtype=np.int8)
    opt = None
    if "opt" in record:
        opt = _real(record, "opt", lineno, nullable=True)
    return LabeledInstance(KnapsackInstance(ident, weights, values, capacity), label, opt)


def write_dataset(dataset: Dataset, path: str) -> None:
    """Write the dataset as JSON lines: a header, then one line per instance."""
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "n_items": dataset.n_items,
        "n_instances": len(dataset.items),
        "seed": dataset.seed,
        "split": {name: list(dataset.split.get(name, [])) for name in SPLITS},
    }
    try:
        with open(path, "w", encoding="utf-8") as fp:
            fp.write(json.dumps(header) + "\n")
            for item in dataset.items:
                fp.write(json.dumps(instance_to_record(item)) + "\n")
    except OSError as err:
        raise exception(-5, "%s: %s" % (path, err.strerror or err)) from err


def _parse_header(line: str) -> dict:
    """Parse and check the header line."""
    try:
        header = json.loads(line)
    except ValueError:
        raise exception(-1, "line 1: header is not valid JSON") from None
    if not isinstance(header, dict):
        raise exception(-1, "line 1: header must be a JSON object")
    if header.get("format") != FORMAT_NAME:
        raise exception(-1, "line 1: field 'format' must be %r" % FORMAT_NAME)
    if header.get("version") != FORMAT_VERSION:
        raise exception(-1, "line 1: unsupported field 'version' %r" % header.get("version"))
    for name in ("n_items", "n_instances"):
        value = header.get(name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise exception(-1, "line 1: field %r must be a non-negative integer" % name)
    split = header.get("split")
    if not isinstance(split, dict):
        raise exception(-1, "line 1: field 'split' must be an object")
    for name in SPLITS:
        ids = split.get(name, [])
        if not isinstance(ids, list) or not all(isinstance(i, int) for i in ids):
            raise exception(-1, "line 1: field 'split.%s' must be a list of ids" % name)
    return header


def read_dataset(path: str) -> Dataset:
    """Read and validate a dataset file."""
    try:
        with open(path, "r", encoding="utf-8") as fp:
            lines = fp.read().splitlines()
    except OSError as err:
        raise exception(-5, "%s: %s" % (path, err.strerror or err)) from err
    if not lines:
        raise exception(-1, "line 1: missing header")
    header = _parse_header(lines[0])
    items = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError:
            raise exception(-1, "line %d: not valid JSON" % lineno) from None
        items.append(record_to_instance(record, lineno))
    if len(items) != header["n_instances"]:
        raise exception(-1, "line 1: field 'n_instances' is %d but file holds %d instances" % (
            header["n_instances"], len(items)))
    split = {name: list(header["split"].get(name, [])) for name in SPLITS}
    dataset = Dataset(header["n_items"], header.get("seed"), items, split)
    dataset.validate()
    return dataset
