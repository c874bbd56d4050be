"""Metrics, quintile reports and model selection."""
import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import exception
from .helpers import fmean
from .instance import Batch, KnapsackInstance, LabeledInstance, alpha, encode_inputs
from .nn import ModelParams, bce_loss, forward, predict

_LOGGER = logging.getLogger(__name__)

QUINTILE_EDGES = (0.2, 0.4, 0.6, 0.8)
QUINTILE_LABELS = ("[0.0,0.2)", "[0.2,0.4)", "[0.4,0.6)", "[0.6,0.8)", "[0.8,1.0]")
OUTLIER_SIGMAS = 6.0

COLUMNS = (
    ("pct_violated", "%Violated", 2),
    ("mean_violation_pct", "Mean Viol", 2),
    ("pct_under", "%Under", 2),
    ("pct_over", "%Over", 2),
    ("avg_overshoot_pct", "Avg-O", 2),
    ("avg_undershoot_pct", "Avg-U", 2),
    ("ar", "AR", 4),
)

CRITERIA = {"ar": "val_ar", "mu_loss": "val_mu_loss", "mu_loss(1)": "val_mu_loss"}


@dataclass
class ReportRow:
    """Metrics of one capacity quintile, or of all instances."""

    label: str
    count: int
    pct_violated: Optional[float] = None
    mean_violation_pct: Optional[float] = None
    pct_under: Optional[float] = None
    pct_over: Optional[float] = None
    avg_overshoot_pct: Optional[float] = None
    avg_undershoot_pct: Optional[float] = None
    ar: Optional[float] = None

    def to_dict(self) -> dict:
        """Return the row as a JSON-ready dict."""
        payload = {"alpha": self.label, "count": self.count}
        payload.update({name: getattr(self, name) for name, _, _ in COLUMNS})
        return payload


@dataclass
class EvalReport:
    """Per-quintile and overall metrics."""

    per_quintile: List[ReportRow]
    overall: ReportRow
    meta: Dict[str, Union[str, int, float]] = field(default_factory=dict)

    @property
    def rows(self) -> List[ReportRow]:
        """Return the quintile rows followed by the "All" row."""
        return self.per_quintile + [self.overall]

    @property
    def counts(self) -> List[int]:
        """Return the instance count of every quintile."""
        return [row.count for row in self.per_quintile]

    def to_dict(self) -> dict:
        """Return the report as a JSON-ready dict."""
        payload = dict(self.meta)
        payload["rows"] = [row.to_dict() for row in self.rows]
        return payload

    def format_table(self) -> str:
        """Render the report as an aligned text table."""
        header = ["alpha", "n"] + [title for _, title, _ in COLUMNS]
        lines = [header]
        for row in self.rows:
            cells = [row.label, str(row.count)]
            for name, _, digits in COLUMNS:
                value = getattr(row, name)
                cells.append("N/A" if value is None else "%.*f" % (digits, value))
            lines.append(cells)
        widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
        return "\n".join(
            "  ".join(cell.rjust(width) for cell, width in zip(line, widths)) for line in lines)


def approximation_ratio(predicted_obj: float, optimal_obj: float) -> float:
    """Return max(f*/f, f/f*), with 1 when both are zero and 2 when one is."""
    for value in (predicted_obj, optimal_obj):
        if not math.isfinite(value) or value < 0.0:
            raise exception(-106, "objective %r" % value)
    if predicted_obj == 0.0 and optimal_obj == 0.0:
        return 1.0
    if predicted_obj == 0.0 or optimal_obj == 0.0:
        return 2.0
    return max(predicted_obj / optimal_obj, optimal_obj / predicted_obj)


def violation_degrees(selections: np.ndarray, weights: np.ndarray,
                      capacities: np.ndarray) -> np.ndarray:
    """Return max(0, sum x_i w_i - W) for every row."""
    return np.maximum(0.0, (selections * weights).sum(axis=1) - capacities)


def mu_loss(logits: np.ndarray, rounded: np.ndarray, labels: np.ndarray, weights: np.ndarray,
            capacities: np.ndarray, mu: float = 1.0) -> float:
    """Return BCE plus mu times the mean violation."""
    if mu < 0.0:
        raise exception(-106, "mu must be non-negative")
    loss, _ = bce_loss(logits, labels)
    violations = violation_degrees(rounded, weights, capacities)
    return loss + mu * math.fsum(violations) / len(violations)


def _chosen_weight(selection: np.ndarray, instance: KnapsackInstance) -> float:
    """Return the total weight of a selection."""
    return math.fsum(instance.weights[np.asarray(selection).astype(bool)])


def _objective(selection: np.ndarray, instance: KnapsackInstance) -> float:
    """Return the total value of a selection."""
    return math.fsum(instance.values[np.asarray(selection).astype(bool)])


def violation_stats(selections: Sequence[np.ndarray],
                    instances: Sequence[KnapsackInstance]) -> Tuple[Optional[float], Optional[float]]:
    """Return the percentage of violated instances and the filtered mean violation percentage.

    The mean runs over violated instances only, after dropping those more
    than six population standard deviations above the mean (one pass).
    """
    if len(selections) != len(instances):
        raise exception(-100, "%d selections for %d instances" % (len(selections), len(instances)))
    if not instances:
        return None, None
    violated = 0
    percentages = []
    for selection, instance in zip(selections, instances):
        if instance.capacity == 0.0:
            _LOGGER.info("Instance %d has zero capacity; left out of violation percentages",
                         instance.id)
            # Any chosen item violates an empty knapsack, whatever it weighs.
            if np.any(np.asarray(selection)):
                violated += 1
            continue
        excess = _chosen_weight(selection, instance) - instance.capacity
        if excess <= 0.0:
            continue
        violated += 1
        percentages.append(100.0 * excess / instance.capacity)
    pct_violated = 100.0 * violated / len(instances)
    if not percentages:
        return pct_violated, None
    mean = fmean(percentages)
    sigma = math.sqrt(fmean((p - mean) ** 2 for p in percentages))
    kept = [p for p in percentages if p <= mean + OUTLIER_SIGMAS * sigma]
    if len(kept) < len(percentages):
        _LOGGER.debug("Dropped %d violation outliers", len(percentages) - len(kept))
    return pct_violated, fmean(kept)


def objective_stats(selections: Sequence[np.ndarray], optimal_values: Sequence[float],
                    instances: Sequence[KnapsackInstance]) -> Tuple[
                        Optional[float], Optional[float], Optional[float], Optional[float]]:
    """Return %under, %over, mean undershoot % and mean overshoot %.

    Exact hits count as neither under nor over.
    """
    if not len(selections) == len(optimal_values) == len(instances):
        raise exception(-100, "misaligned selections, labels and instances")
    if not instances:
        return None, None, None, None
    under, over = [], []
    n_under = n_over = 0
    for selection, optimal, instance in zip(selections, optimal_values, instances):
        predicted = _objective(selection, instance)
        if predicted < optimal:
            n_under += 1
            under.append(100.0 * (optimal - predicted) / optimal)
        elif predicted > optimal:
            n_over += 1
            if optimal > 0.0:
                over.append(100.0 * (predicted - optimal) / optimal)
            else:
                _LOGGER.info("Instance %d has a zero optimum; left out of overshoot averages",
                             instance.id)
    total = len(instances)
    return 100.0 * n_under / total, 100.0 * n_over / total, fmean(under), fmean(over)


def _row(label: str, selections: List[np.ndarray], items: List[LabeledInstance]) -> ReportRow:
    """Return the metrics of one group of instances."""
    row = ReportRow(label, len(items))
    if not items:
        return row
    instances = [item.instance for item in items]
    optima = [item.optimal_value for item in items]
    row.pct_violated, row.mean_violation_pct = violation_stats(selections, instances)
    (row.pct_under, row.pct_over,
     row.avg_undershoot_pct, row.avg_overshoot_pct) = objective_stats(selections, optima, instances)
    row.ar = fmean(approximation_ratio(_objective(selection, instance), optimal)
                   for selection, instance, optimal in zip(selections, instances, optima))
    return row


def quintile(instance: KnapsackInstance) -> int:
    """Return the capacity quintile index of an instance."""
    return bisect.bisect_right(QUINTILE_EDGES, alpha(instance))


def evaluate_selections(selections: Sequence[np.ndarray],
                        items: Sequence[LabeledInstance]) -> EvalReport:
    """Return the report for 0/1 predictions of labeled instances."""
    if len(selections) != len(items):
        raise exception(-100, "%d selections for %d instances" % (len(selections), len(items)))
    if not all(item.is_labeled for item in items):
        raise exception(-2, "evaluation needs labeled instances")
    groups = [([], []) for _ in QUINTILE_LABELS]
    for selection, item in zip(selections, items):
        group = groups[quintile(item.instance)]
        group[0].append(np.asarray(selection))
        group[1].append(item)
    per_quintile = [_row(label, sels, its) for label, (sels, its) in zip(QUINTILE_LABELS, groups)]
    overall = _row("All", [np.asarray(s) for s in selections], list(items))
    return EvalReport(per_quintile, overall)


def evaluate(params: ModelParams, items: Sequence[LabeledInstance],
             batch_size: int = 1024) -> EvalReport:
    """Decode the network's predictions by rounding and report on them."""
    if not items:
        return evaluate_selections([], [])
    _, selections = predict(params, encode_inputs(items).inputs, batch_size)
    return evaluate_selections(list(selections), items)


def validation_metrics(params: ModelParams, batch: Batch, mu: float = 1.0,
                       batch_size: int = 1024) -> Dict[str, float]:
    """Return the AR, mu-loss and violation rate of a labeled batch in eval mode."""
    n = len(batch.inputs)
    losses, violations, ratios = [], [], []
    for first in range(0, n, batch_size):
        rows = slice(first, first + batch_size)
        logits, _, rounded, _ = forward(params, batch.inputs[rows], mode="eval")
        loss, _ = bce_loss(logits, batch.labels[rows])
        losses.append(loss * len(logits))
        violations.extend(violation_degrees(rounded, batch.weights[rows],
                                            batch.capacities[rows]).tolist())
        for selection, label, values in zip(rounded, batch.labels[rows], batch.values[rows]):
            predicted = math.fsum(values[selection.astype(bool)])
            optimal = math.fsum(values[label.astype(bool)])
            ratios.append(approximation_ratio(predicted, optimal))
    mean_violation = math.fsum(violations) / n
    return {
        "ar": fmean(ratios),
        "mu_loss": math.fsum(losses) / n + mu * mean_violation,
        "violation_rate": sum(1 for v in violations if v > 0.0) / n,
    }


def select_model(epoch_logs: Sequence[Union[dict, object]], criterion: str) -> int:
    """Return the earliest epoch with the minimum validation criterion."""
    try:
        key = CRITERIA[criterion]
    except KeyError:
        raise exception(-105, "unknown criterion %r" % criterion) from None
    if not epoch_logs:
        raise exception(-105, "empty epoch log")
    best_epoch, best_value = None, math.inf
    for entry in epoch_logs:
        record = entry if isinstance(entry, dict) else entry.to_dict()
        value = record.get(key)
        if value is None:
            raise exception(-105, "epoch %s has no %s" % (record.get("epoch"), key))
        if best_epoch is None or value < best_value:
            best_epoch, best_value = record["epoch"], value
    return best_epoch
