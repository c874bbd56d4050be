#!/usr/bin/python3
"""Knapsack approximation with Lagrangian dual training."""
from typing import Dict, Tuple, Type

from .evaluation import (EvalReport, ReportRow, approximation_ratio, evaluate,
                         evaluate_selections, mu_loss, objective_stats, select_model,
                         violation_stats)
from .exceptions import KpldfException
from .instance import (Dataset, KnapsackInstance, LabeledInstance, encode_inputs,
                       generate_dataset, read_dataset, write_dataset)
from .ldf import (EpochLog, MultiplierState, TrainConfig, TrainResult, constraint_violation,
                  expand_grid, fc, lagrangian_loss, ldf as _ldf_trainer, ldf_pretrained, train, trainer,
                  update_multiplier)
from .nn import (ModelParams, forward, init_params, load_checkpoint, predict,
                 save_checkpoint)
from .solver import SolveResult, brute_force, dantzig_bound, label_dataset, solve_exact


def get_regimes() -> Dict[str, Tuple[Type[trainer], str, str]]:
    """Return all supported training regimes."""
    return {
        "fc": (fc, "FC", "Supervised only, multiplier fixed at zero"),
        "ldf": (_ldf_trainer, "LDF", "Lagrangian dual training from scratch"),
        "ldf_pretrained": (ldf_pretrained, "Pre-trained LDF",
                           "Supervised warm-up, then Lagrangian dual training"),
    }


def gentrainer(config: TrainConfig) -> trainer:
    """Generate a trainer."""
    try:
        trainer_class, _, _ = get_regimes()[config.regime]
    except KeyError:
        return trainer(config)
    return trainer_class(config)
