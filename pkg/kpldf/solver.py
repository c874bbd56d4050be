"""Exact 0-1 knapsack solving."""
import bisect
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import KpldfException, exception
from .instance import FEASIBILITY_TOL, Dataset, KnapsackInstance, LabeledInstance

_LOGGER = logging.getLogger(__name__)

NODE_LIMIT = 10 ** 9
BRUTE_FORCE_MAX_ITEMS = 25
# Running weight sums closer than this to the capacity are rechecked exactly.
_NEAR_CAPACITY = 1e-9

# Enumeration is vectorized over the trailing items in chunks of this many bits.
_CHUNK_BITS = 16


@dataclass(eq=False)
class SolveResult:
    """An optimal selection and search statistics."""

    selection: np.ndarray
    objective: float
    nodes_explored: int


def _objective(instance: KnapsackInstance, selection: np.ndarray) -> float:
    """Return the correctly rounded total value of a selection."""
    return math.fsum(instance.values[selection.astype(bool)])


def _ratio_order(instance: KnapsackInstance) -> List[int]:
    """Return positive-value items by value/weight ratio, descending.

    Zero-value items never improve the objective and are left out, which
    also keeps the lexicographically smallest optimum.
    """
    def key(i: int) -> Tuple[float, int]:
        w, v = instance.weights[i], instance.values[i]
        ratio = math.inf if w == 0.0 else v / w
        return -ratio, i

    candidates = [i for i in range(instance.n_items) if instance.values[i] > 0.0]
    return sorted(candidates, key=key)


class _Search:
    """Depth-first branch and bound over items in ratio order."""

    def __init__(self, instance: KnapsackInstance, node_limit: int) -> None:
        """Initialize the search state."""
        self.instance = instance
        self.node_limit = node_limit
        self.order = _ratio_order(instance)
        self.w = [float(instance.weights[i]) for i in self.order]
        self.v = [float(instance.values[i]) for i in self.order]
        self.pw = [0.0] + list(itertools.accumulate(self.w))
        self.pv = [0.0] + list(itertools.accumulate(self.v))
        self.limit = instance.capacity + FEASIBILITY_TOL
        self.best_value = -math.inf
        self.best_selection: Optional[np.ndarray] = None
        self.nodes = 0

    def selection(self, chosen: Sequence[int]) -> np.ndarray:
        """Return the 0/1 vector of positions `chosen` in ratio order."""
        selection = np.zeros(self.instance.n_items, dtype=np.int8)
        selection[[self.order[p] for p in chosen]] = 1
        return selection

    def fits(self, weight: float, chosen: Sequence[int]) -> bool:
        """Return whether the positions `chosen`, of running weight `weight`, fit.

        Running sums decide outright away from the capacity; near it the
        instance's own check settles the question.
        """
        if abs(weight - self.limit) > _NEAR_CAPACITY:
            return weight <= self.limit
        return self.instance.fits(self.selection(chosen))

    def critical(self, depth: int, room: float) -> int:
        """Return the first position from `depth` whose prefix no longer fits."""
        return bisect.bisect_right(self.pw, self.pw[depth] + room, lo=depth) - 1

    def bound(self, depth: int, weight: float, value: float) -> Tuple[float, int]:
        """Return the Dantzig bound of a node and its critical position.

        The room is widened by the near-capacity margin so rounding in the
        running sums never cuts off a selection that fits.
        """
        room = max(0.0, self.limit - weight) + _NEAR_CAPACITY
        k = self.critical(depth, room)
        bound = value + (self.pv[k] - self.pv[depth])
        if k < len(self.w):
            bound += (room - (self.pw[k] - self.pw[depth])) * self.v[k] / self.w[k]
        return bound, k

    def offer(self, chosen: Sequence[int]) -> bool:
        """Consider a complete selection, keeping the lexicographically smallest optimum.

        Returns False if the selection does not fit.
        """
        selection = self.selection(chosen)
        if not self.instance.fits(selection):
            return False
        value = _objective(self.instance, selection)
        if value > self.best_value or (
                value == self.best_value and tuple(selection) < tuple(self.best_selection)):
            self.best_value = value
            self.best_selection = selection
        return True

    def run(self) -> SolveResult:
        """Search the tree and return the optimum."""
        m = len(self.w)
        stack = [(0, 0.0, 0.0, ())]
        while stack:
            depth, weight, value, chosen = stack.pop()
            self.nodes += 1
            if self.nodes > self.node_limit:
                raise exception(-101, "%d nodes" % self.node_limit)
            if depth == m:
                self.offer(chosen)
                continue
            bound, k = self.bound(depth, weight, value)
            # Everything left fits.
            if k == m and self.offer(chosen + tuple(range(depth, m))):
                continue
            slack = 1e-12 * max(1.0, abs(self.best_value))
            if bound < self.best_value - slack:
                continue
            stack.append((depth + 1, weight, value, chosen))
            taken = chosen + (depth,)
            if self.fits(weight + self.w[depth], taken):
                stack.append((depth + 1, weight + self.w[depth], value + self.v[depth], taken))
        return SolveResult(self.best_selection, self.best_value, self.nodes)


def dantzig_bound(instance: KnapsackInstance) -> float:
    """Return the LP relaxation bound of an instance."""
    if instance.capacity < 0.0:
        raise exception(-2, "instance %d: negative capacity" % instance.id)
    return _Search(instance, NODE_LIMIT).bound(0, 0.0, 0.0)[0]


def solve_exact(instance: KnapsackInstance, node_limit: int = NODE_LIMIT) -> SolveResult:
    """Return an optimal selection by branch and bound."""
    if instance.capacity < 0.0:
        raise exception(-2, "instance %d: negative capacity" % instance.id)
    result = _Search(instance, node_limit).run()
    _LOGGER.debug("Instance %d solved in %d nodes", instance.id, result.nodes_explored)
    return result


def brute_force(instance: KnapsackInstance) -> SolveResult:
    """Return an optimal selection by enumerating every subset."""
    n = instance.n_items
    if n > BRUTE_FORCE_MAX_ITEMS:
        raise exception(-102, "instance %d has %d items, limit is %d" % (
            instance.id, n, BRUTE_FORCE_MAX_ITEMS))
    low_bits = min(n, _CHUNK_BITS)
    high_bits = n - low_bits
    rows = np.arange(1 << low_bits)
    low = ((rows[:, None] >> np.arange(low_bits - 1, -1, -1)) & 1).astype(np.int8)
    limit = instance.capacity + FEASIBILITY_TOL
    best_value = -math.inf
    best_selection = None
    # Rows are visited in lexicographic order, item 0 most significant.
    for prefix in range(1 << high_bits):
        bits = np.empty((len(rows), n), dtype=np.int8)
        bits[:, :high_bits] = [(prefix >> (high_bits - 1 - j)) & 1 for j in range(high_bits)]
        bits[:, high_bits:] = low
        total_weight = bits @ instance.weights
        fits = total_weight <= limit
        for r in np.flatnonzero(np.abs(total_weight - limit) <= _NEAR_CAPACITY):
            fits[r] = instance.fits(bits[r])
        total_value = np.where(fits, bits @ instance.values, -np.inf)
        top = total_value.max()
        if top == -np.inf or top < best_value - 1e-9:
            continue
        for r in np.flatnonzero(total_value >= top - 1e-9):
            value = _objective(instance, bits[r])
            if value > best_value:
                best_value = value
                best_selection = bits[r].copy()
    return SolveResult(best_selection, best_value, 1 << n)


def _label(item: LabeledInstance) -> LabeledInstance:
    """Return the instance labeled with its exact optimum."""
    if item.is_labeled:
        return item
    try:
        result = solve_exact(item.instance)
    except KpldfException as err:
        raise type(err)(err.errno, "instance %d" % item.id, err.strerror) from err
    return LabeledInstance(item.instance, result.selection, result.objective)


def label_dataset(dataset: Dataset, workers: int = 1) -> Dataset:
    """Return the dataset with every instance labeled."""
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            items = list(pool.map(_label, dataset.items, chunksize=16))
    else:
        items = [_label(item) for item in dataset.items]
    split = {name: list(ids) for name, ids in dataset.split.items()}
    return Dataset(dataset.n_items, dataset.seed, items, split)
