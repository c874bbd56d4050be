"""Lagrangian dual training of knapsack approximators."""
import itertools
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Tuple

import numpy as np

from .evaluation import validation_metrics, violation_degrees
from .exceptions import check_finite, exception
from .helpers import fingerprint, spawn_rngs
from .instance import Batch, Dataset, KnapsackInstance, encode_inputs
from .nn import (DEFAULT_HIDDEN, DEFAULT_K, AdamState, ModelParams, adam_step, backward,
                 bce_loss, clip_global_norm, forward, init_params, save_checkpoint,
                 surrogate_round_backward)

_LOGGER = logging.getLogger(__name__)

REGIMES = ("fc", "ldf", "ldf_pretrained")

# Settings of the selected model per regime; used where a config leaves them unset.
REGIME_DEFAULTS = {
    "fc": {"learning_rate": 1e-3, "lagrangian_step": 0.0, "max_grad_norm": 10.0,
           "lambda_init": 0.0},
    "ldf": {"learning_rate": 1e-4, "lagrangian_step": 1e-7, "max_grad_norm": 0.5,
            "lambda_init": 1.0},
    "ldf_pretrained": {"learning_rate": 1e-4, "lagrangian_step": 1e-4, "max_grad_norm": 10.0,
                       "lambda_init": 1.0},
}

HYPERPARAMETER_GRIDS = {
    "fc": {
        "learning_rate": [1e-4, 1e-3],
        "max_grad_norm": [1.0, 10.0],
    },
    "ldf": {
        "learning_rate": [1e-5, 1e-4, 1e-3],
        "lagrangian_step": [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
        "max_grad_norm": [0.5, 1.0, 10.0],
    },
    "ldf_pretrained": {
        "learning_rate": [1e-4, 1e-3],
        "lagrangian_step": [1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
        "max_grad_norm": [1.0, 10.0],
    },
}

SELECTION_CRITERIA = {"fc": "ar", "ldf": "mu_loss", "ldf_pretrained": "mu_loss"}

CHECKPOINT_NAME = "best.ldfm"
SIDECAR_NAME = "best.json"
EPOCH_LOG_NAME = "epochs.jsonl"


@dataclass
class TrainConfig:
    """Every knob of a training run."""

    regime: str = "ldf"
    learning_rate: Optional[float] = None
    lagrangian_step: Optional[float] = None
    max_grad_norm: Optional[float] = None
    lambda_init: Optional[float] = None
    k: float = DEFAULT_K
    batch_size: int = 256
    n_epochs: int = 500
    pretrain_epochs: Optional[int] = None
    seed: int = 0
    early_stop: int = 25
    hidden: Tuple[int, ...] = DEFAULT_HIDDEN
    mu: float = 1.0
    eval_batch_size: int = 1024
    log_timing: bool = True

    def __post_init__(self) -> None:
        """Fill regime defaults and validate."""
        if self.regime not in REGIMES:
            raise exception(-104, "regime must be one of %s, got %r" % (REGIMES, self.regime))
        if self.regime == "fc":
            if self.lagrangian_step not in (None, 0, 0.0) or self.lambda_init not in (None, 0, 0.0):
                raise exception(-104, "regime fc requires lagrangian_step = 0 and lambda_init = 0")
        for name, value in REGIME_DEFAULTS[self.regime].items():
            if getattr(self, name) is None:
                setattr(self, name, value)
        if self.pretrain_epochs is None:
            self.pretrain_epochs = self.n_epochs // 2 if self.regime == "ldf_pretrained" else 0
        self.hidden = tuple(int(h) for h in self.hidden)
        self._check()

    def _check(self) -> None:
        """Raise ConfigError on out-of-range values."""
        positive = ("learning_rate", "max_grad_norm", "k")
        for name in positive:
            if not getattr(self, name) > 0:
                raise exception(-104, "%s must be positive" % name)
        for name in ("lagrangian_step", "lambda_init", "mu"):
            if not getattr(self, name) >= 0:
                raise exception(-104, "%s must be non-negative" % name)
        for name in ("batch_size", "n_epochs", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise exception(-104, "%s must be at least 1" % name)
        if self.pretrain_epochs < 0 or self.early_stop < 0:
            raise exception(-104, "pretrain_epochs and early_stop must be non-negative")
        if self.pretrain_epochs and self.regime != "ldf_pretrained":
            raise exception(-104, "pretrain_epochs only applies to regime ldf_pretrained")
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise exception(-104, "hidden must be two positive widths")

    @property
    def selection(self) -> str:
        """Return the validation metric used for model selection."""
        return SELECTION_CRITERIA[self.regime]

    def to_dict(self) -> dict:
        """Return the config as a JSON-ready dict."""
        payload = asdict(self)
        payload["hidden"] = list(self.hidden)
        return payload

    def fingerprint(self) -> str:
        """Return the config hash stored next to checkpoints."""
        return fingerprint(self.to_dict())

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        """Build a config from a JSON object, rejecting unknown keys."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise exception(-104, "unknown config keys %s" % ", ".join(unknown))
        try:
            return cls(**payload)
        except TypeError as err:
            raise exception(-104, str(err)) from err


def expand_grid(payload: dict) -> List[dict]:
    """Expand list-valued keys into the cartesian product of configs."""
    axes, fixed = {}, {}
    for name, value in payload.items():
        is_axis = isinstance(value, list) and (
            name != "hidden" or any(isinstance(v, list) for v in value))
        if is_axis:
            if not value:
                raise exception(-104, "grid axis %r is empty" % name)
            axes[name] = value
        else:
            fixed[name] = value
    names = sorted(axes)
    combos = []
    for values in itertools.product(*(axes[name] for name in names)):
        combo = dict(fixed)
        combo.update(zip(names, values))
        combos.append(combo)
    return combos


@dataclass
class MultiplierState:
    """The shared Lagrange multiplier of the capacity constraint."""

    lam: float
    history: List[Tuple[float, float]] = field(default_factory=list)


@dataclass
class EpochLog:
    """One line of the per-epoch training log."""

    epoch: int
    lam: float
    total_violation: float
    train_loss: float
    val_ar: float
    val_mu_loss: float
    val_violation_rate: float
    wall_clock_s: Optional[float]

    def to_dict(self) -> dict:
        """Return the JSON-lines record."""
        return {
            "epoch": self.epoch,
            "lambda": self.lam,
            "total_violation": self.total_violation,
            "train_loss": self.train_loss,
            "val_ar": self.val_ar,
            "val_mu_loss": self.val_mu_loss,
            "val_violation_rate": self.val_violation_rate,
            "wall_clock_s": self.wall_clock_s,
        }


@dataclass
class TrainResult:
    """Outcome of a training run."""

    params: ModelParams
    multiplier: MultiplierState
    log: List[EpochLog]
    best_epoch: int
    best_value: float
    converged_epoch: Optional[int]
    unfreeze_epoch: Optional[int]
    wall_clock_s: float

    @property
    def post_unfreeze_epochs(self) -> Optional[int]:
        """Return the epochs run after the multiplier was released."""
        if self.unfreeze_epoch is None:
            return None
        last = self.converged_epoch if self.converged_epoch is not None else len(self.log) - 1
        return last - self.unfreeze_epoch + 1


def constraint_violation(selection: np.ndarray, instance: KnapsackInstance) -> float:
    """Return max(0, sum x_i w_i - W)."""
    selection = np.asarray(selection)
    if selection.shape != instance.weights.shape:
        raise exception(-100, "selection %s for %d items" % (selection.shape, instance.n_items))
    return max(0.0, math.fsum(instance.weights[selection.astype(bool)]) - instance.capacity)


def lagrangian_loss(logits: np.ndarray, probs: np.ndarray, rounded: np.ndarray,
                    labels: np.ndarray, weights: np.ndarray, capacities: np.ndarray,
                    lam: float, k: float = DEFAULT_K) -> Tuple[float, np.ndarray]:
    """Return BCE plus lam times the batch mean violation, and the logit gradient.

    The violation term reaches the logits through the surrogate rounding rule
    and the sigmoid; the BCE term bypasses the rounding layer.
    """
    if lam < 0.0:
        raise exception(-104, "lambda must be non-negative")
    loss, grad = bce_loss(logits, labels)
    if lam == 0.0:
        return loss, grad
    batch = logits.shape[0]
    violations = violation_degrees(rounded, weights, capacities)
    loss = loss + lam * math.fsum(violations) / batch
    d_rounded = (lam / batch) * weights * (violations > 0.0)[:, None]
    d_probs = surrogate_round_backward(probs, d_rounded, k)
    return loss, grad + d_probs * probs * (1.0 - probs)


def update_multiplier(state: MultiplierState, total_violation: float,
                      s: float) -> MultiplierState:
    """Take one subgradient step on the multiplier and record the epoch."""
    if total_violation < 0.0:
        raise exception(-106, "total violation must be non-negative")
    state.history.append((state.lam, total_violation))
    state.lam = max(0.0, state.lam + s * total_violation)
    return state


class trainer:
    """Trains a model under one regime."""

    # Regimes with a warm-up keep the multiplier at zero for the first pretrain_epochs.
    warmup = False

    def __init__(self, config: TrainConfig) -> None:
        """Initialize the trainer."""
        self.config = config
        self.type = "Unknown"

    def initial_lambda(self) -> float:
        """Return the multiplier at epoch 0."""
        return self.config.lambda_init

    def step_size(self, pretraining: bool) -> float:
        """Return the multiplier step for an epoch."""
        return 0.0 if pretraining else self.config.lagrangian_step

    def train(self, dataset: Dataset, out_dir: Optional[str] = None) -> TrainResult:
        """Run the training loop and return the best model under the selection metric."""
        cfg = self.config
        if not dataset.is_labeled:
            raise exception(-2, "training needs a labeled dataset")
        train_items, val_items = dataset.subset("train"), dataset.subset("val")
        if not train_items or not val_items:
            raise exception(-2, "training needs non-empty train and val splits")
        train_batch, val_batch = encode_inputs(train_items), encode_inputs(val_items)
        params = init_params(dataset.n_items, cfg.seed, cfg.hidden)
        adam = AdamState.zeros(params, cfg.learning_rate)
        multiplier = MultiplierState(self.initial_lambda())
        shuffle = spawn_rngs(cfg.seed, 1)[0]
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            log_fp = open(os.path.join(out_dir, EPOCH_LOG_NAME), "w", encoding="utf-8")
        else:
            log_fp = None

        log: List[EpochLog] = []
        best_value, best_epoch, best_params = math.inf, -1, params.copy()
        phase_best, phase_best_epoch = math.inf, 0
        converged_epoch = unfreeze_epoch = None
        selection = cfg.selection
        start = time.perf_counter()
        try:
            for epoch in range(cfg.n_epochs):
                pretraining = self.warmup and cfg.pretrain_epochs > 0 and unfreeze_epoch is None
                total_violation, train_loss = self._run_epoch(
                    epoch, params, adam, multiplier.lam, train_batch, shuffle)
                metrics = validation_metrics(params, val_batch, cfg.mu, cfg.eval_batch_size)
                elapsed = time.perf_counter() - start
                entry = EpochLog(epoch, multiplier.lam, total_violation, train_loss,
                                 metrics["ar"], metrics["mu_loss"], metrics["violation_rate"],
                                 elapsed if cfg.log_timing else None)
                log.append(entry)
                if log_fp:
                    log_fp.write(json.dumps(entry.to_dict()) + "\n")
                    log_fp.flush()
                _LOGGER.info("epoch %d: lambda=%.6g violation=%.6g loss=%.6g val_ar=%.6f "
                             "val_mu_loss=%.6f val_violated=%.2f%%", epoch, entry.lam,
                             total_violation, train_loss, entry.val_ar, entry.val_mu_loss,
                             100.0 * entry.val_violation_rate)
                update_multiplier(multiplier, total_violation, self.step_size(pretraining))

                value = metrics[selection]
                if value < best_value:
                    best_value, best_epoch, best_params = value, epoch, params.copy()
                    if out_dir:
                        self._save_best(out_dir, best_params, epoch, entry.lam)

                # Convergence is judged on AR while pretraining, else on the selection metric.
                tracked = metrics["ar"] if pretraining else value
                if tracked < phase_best:
                    phase_best, phase_best_epoch = tracked, epoch
                stalled = cfg.early_stop and epoch - phase_best_epoch >= cfg.early_stop
                if pretraining and (stalled or epoch + 1 >= cfg.pretrain_epochs):
                    _LOGGER.info("Releasing the multiplier after epoch %d", epoch)
                    unfreeze_epoch = epoch + 1
                    multiplier.lam = cfg.lambda_init
                    phase_best, phase_best_epoch = math.inf, epoch + 1
                elif stalled:
                    converged_epoch = epoch
                    _LOGGER.info("Converged at epoch %d (best epoch %d)", epoch, best_epoch)
                    break
        finally:
            if log_fp:
                log_fp.close()
        return TrainResult(best_params, multiplier, log, best_epoch, best_value,
                           converged_epoch, unfreeze_epoch, time.perf_counter() - start)

    def _run_epoch(self, epoch: int, params: ModelParams, adam: AdamState, lam: float,
                   batch: Batch, shuffle: np.random.Generator) -> Tuple[float, float]:
        """Run one pass over the training set; return total violation and mean loss."""
        cfg = self.config
        n = len(batch.inputs)
        order = shuffle.permutation(n)
        violations, losses = [], []
        for index, first in enumerate(range(0, n, cfg.batch_size)):
            rows = order[first:first + cfg.batch_size]
            weights, capacities = batch.weights[rows], batch.capacities[rows]
            logits, probs, rounded, trace = forward(params, batch.inputs[rows], "train", k=cfg.k)
            loss, grad_logits = lagrangian_loss(logits, probs, rounded, batch.labels[rows],
                                                weights, capacities, lam, cfg.k)
            check_finite(loss, -103, "epoch %d, batch %d" % (epoch, index))
            violations.extend(violation_degrees(rounded, weights, capacities).tolist())
            losses.append(loss * len(rows))
            grads = clip_global_norm(backward(params, trace, grad_logits), cfg.max_grad_norm)
            adam_step(params, grads, adam)
        return math.fsum(violations), math.fsum(losses) / n

    def _save_best(self, out_dir: str, params: ModelParams, epoch: int, lam: float) -> None:
        """Write the best checkpoint and its sidecar."""
        save_checkpoint(params, os.path.join(out_dir, CHECKPOINT_NAME))
        sidecar = {"epoch": epoch, "lambda": lam, "config_hash": self.config.fingerprint(),
                   "rng_seed": params.rng_seed}
        with open(os.path.join(out_dir, SIDECAR_NAME), "w", encoding="utf-8") as fp:
            json.dump(sidecar, fp)
        _LOGGER.debug("Saved best checkpoint of epoch %d to %s", epoch, out_dir)


class fc(trainer):
    """Plain supervised training with the multiplier fixed at zero."""

    def __init__(self, *args, **kwargs) -> None:
        """Initialize the trainer."""
        trainer.__init__(self, *args, **kwargs)
        self.type = "FC"

    def step_size(self, pretraining: bool) -> float:
        """Return the multiplier step for an epoch."""
        return 0.0


class ldf(trainer):
    """Lagrangian dual training from scratch."""

    def __init__(self, *args, **kwargs) -> None:
        """Initialize the trainer."""
        trainer.__init__(self, *args, **kwargs)
        self.type = "LDF"


class ldf_pretrained(ldf):
    """Lagrangian dual training after a supervised warm-up with the multiplier at zero."""

    warmup = True

    def __init__(self, *args, **kwargs) -> None:
        """Initialize the trainer."""
        ldf.__init__(self, *args, **kwargs)
        self.type = "Pre-trained LDF"

    def initial_lambda(self) -> float:
        """Return the multiplier at epoch 0."""
        return 0.0 if self.config.pretrain_epochs > 0 else self.config.lambda_init


def train(dataset: Dataset, config: TrainConfig, out_dir: Optional[str] = None) -> TrainResult:
    """Train a model under the configured regime."""
    from . import gentrainer
    return gentrainer(config).train(dataset, out_dir)
