"""
Ablation counterparts of the full method.

All kinds go through ``trainer.run_training`` so they share the batch stream,
initialization and dropout noise of a given seed.
"""

from __future__ import annotations

import logging
from dataclasses import replace
from enum import Enum
from typing import Tuple

from lib.datasets import Dataset
from lib.losses import pi_consistency_loss, supervised_loss
from lib.networks import ModelState
from lib.trainer import TrainConfig, TrainLog, full_objective, run_training

logger = logging.getLogger(__name__)

__all__ = ["BaselineKind", "pi_consistency_loss", "train_baseline"]


class BaselineKind(str, Enum):
    supervised_only = "supervised_only"
    pi_model = "pi_model"
    full_method = "full_method"
    # optional ablation rows
    full_no_cons = "full_no_cons"
    full_pi = "full_pi"


def _supervised_objective(batch, state, schedule, rng, tape):
    return supervised_loss(batch, state, pi_weight=0.0, rng=rng, training=True, tape=tape)


def _pi_objective(batch, state, schedule, rng, tape):
    return supervised_loss(batch, state, pi_weight=schedule.weights.pi_weight, rng=rng, training=True, tape=tape)


def _pi_max(ds: Dataset, cfg: TrainConfig) -> float:
    # Pi weight takes the lambda1 magnitude, and schedule_at gives it the lambda1 ramp
    return cfg.k1 * ds.n_labeled / ds.n


def train_baseline(ds: Dataset, kind: BaselineKind, cfg: TrainConfig) -> Tuple[ModelState, TrainLog]:
    kind = BaselineKind(kind)
    tag = kind.value
    if kind is BaselineKind.full_method:
        return run_training(ds, cfg, full_objective, tag=tag)
    if kind is BaselineKind.supervised_only:
        return run_training(ds, cfg, _supervised_objective, tag=tag, applied=())
    if kind is BaselineKind.pi_model:
        cfg = replace(cfg, pi_weight_max=_pi_max(ds, cfg))
        return run_training(ds, cfg, _pi_objective, tag=tag, applied=("pi_weight",))
    if kind is BaselineKind.full_no_cons:
        return run_training(ds, replace(cfg, lambda3_max=0.0), full_objective, tag=tag, applied=("lambda1", "lambda2"))
    if kind is BaselineKind.full_pi:
        pi_max = _pi_max(ds, cfg)
        logger.info(f"[{tag}] Pi term on top of the full objective, max weight {pi_max:.4g}")
        return run_training(ds, replace(cfg, pi_weight_max=pi_max), full_objective, tag=tag)
    raise ValueError(f"unhandled baseline kind {kind}")
