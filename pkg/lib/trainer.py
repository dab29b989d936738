"""
The optimization loop: batches -> objective with ramped weights -> backward ->
one Adam step over theta and alpha jointly -> EMA update of alpha'.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from lib import autodiff as ad
from lib.autodiff import NonFiniteError, Node, ParameterError, Tape
from lib.batching import TOY_BATCH_SPEC, BatchSpec, TrainingBatch, build_batch, epoch_indices, epoch_schedule
from lib.datasets import Dataset
from lib.losses import LossWeights, combined_loss
from lib.networks import ModelState, ema_update, init_model_state, toy_feature_specs, toy_similarity_spec

logger = logging.getLogger(__name__)

try:
    from tqdm import tqdm  # type: ignore
except ImportError:
    tqdm = None


def progress_iter(iterable: Sequence, enabled: bool = True, **kwargs):
    if tqdm is None or not enabled:
        return iterable
    return tqdm(iterable, **kwargs)


class TrainingAborted(NonFiniteError):
    """A loss term or gradient went non-finite; names the first offender."""

    def __init__(self, term: str, epoch: int, step: int, detail: str = ""):
        message = f"non-finite {term} at epoch {epoch}, step {step}"
        if detail:
            message += f": {detail}"
        super().__init__(message, op="train", term=term)
        self.epoch = epoch
        self.step = step
        self.detail = detail

    def __reduce__(self):
        # picklable across the seed worker pool
        return (type(self), (self.term, self.epoch, self.step, self.detail))


@dataclass
class RampConfig:
    lambda13_rampup_epochs: int = 80
    lambda2_zero_until: int = 100
    lambda2_rampup_epochs: int = 50
    lr_rampup_epochs: int = 80


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # coupled L2 penalty, added to every gradient
    weight_decay: float = 5e-4


@dataclass
class TrainConfig:
    beta: float = 3.0
    k1: float = 3.0
    k2: float = 3.0
    lambda3_max: float = 0.15
    epochs: int = 200
    lr_max: float = 1e-3
    adam: AdamConfig = field(default_factory=AdamConfig)
    ema_decay: float = 0.99
    ramp: RampConfig = field(default_factory=RampConfig)
    spec: BatchSpec = TOY_BATCH_SPEC
    aug_sigma: float = 0.05
    seed: int = 0

    # network shape (toy architecture by default)
    hidden: int = 100
    phi_dropout: float = 0.2

    # extra Pi-model term on top of the full objective (0 disables it)
    pi_weight_max: float = 0.0
    # False drops the repulsion half of the extended Laplacian term
    unsup_repulsion: bool = True
    progress: bool = False

    def validate(self) -> "TrainConfig":
        if self.beta <= 0:
            raise ParameterError(f"beta must be > 0, got {self.beta}")
        for name in ("k1", "k2", "lambda3_max", "pi_weight_max", "lr_max", "aug_sigma"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ParameterError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.adam.weight_decay < 0:
            raise ParameterError(f"adam.weight_decay must be >= 0, got {self.adam.weight_decay}")
        r = self.ramp
        for name in ("lambda13_rampup_epochs", "lambda2_rampup_epochs", "lr_rampup_epochs"):
            if getattr(r, name) <= 0:
                raise ParameterError(f"ramp.{name} must be > 0")
        if r.lambda2_zero_until < 0:
            raise ParameterError("ramp.lambda2_zero_until must be >= 0")
        if self.epochs > 0:
            ends = {
                "lambda13_rampup_epochs": r.lambda13_rampup_epochs,
                "lambda2 ramp end": r.lambda2_zero_until + r.lambda2_rampup_epochs,
                "lr_rampup_epochs": r.lr_rampup_epochs,
            }
            for name, end in ends.items():
                if end > self.epochs:
                    raise ParameterError(f"{name}={end} exceeds epochs={self.epochs}")
        return self


def rampup(epoch: float, max_val: float, ramp_epochs: int, delay: int = 0) -> float:
    """0 before ``delay``, then max_val * exp(-5 (1 - t)^2), t = clamp((epoch - delay)/ramp_epochs, 0, 1)."""
    if ramp_epochs <= 0:
        raise ParameterError(f"ramp_epochs must be > 0, got {ramp_epochs}")
    if epoch < delay:
        return 0.0
    t = min(max((epoch - delay) / ramp_epochs, 0.0), 1.0)
    if t >= 1.0:
        return float(max_val)
    return float(max_val * math.exp(-5.0 * (1.0 - t) ** 2))


@dataclass(frozen=True)
class Schedule:
    lr: float
    weights: LossWeights


def schedule_at(cfg: TrainConfig, epoch: int, n_labeled: int, n: int) -> Schedule:
    """Effective learning rate and loss coefficients for 0-based ``epoch``."""
    r = cfg.ramp
    ratio = n_labeled / n
    lambda1 = rampup(epoch, cfg.k1 * ratio, r.lambda13_rampup_epochs)
    lambda2 = rampup(epoch, cfg.k2 * ratio, r.lambda2_rampup_epochs, delay=r.lambda2_zero_until)
    lambda3 = rampup(epoch, cfg.lambda3_max, r.lambda13_rampup_epochs)
    pi_weight = rampup(epoch, cfg.pi_weight_max, r.lambda13_rampup_epochs)
    lr = rampup(epoch, cfg.lr_max, r.lr_rampup_epochs)
    weights = LossWeights(
        beta=cfg.beta, lambda1=lambda1, lambda2=lambda2, lambda3=lambda3,
        pi_weight=pi_weight, repulsion=cfg.unsup_repulsion,
    )
    return Schedule(lr=lr, weights=weights)


# --- Adam ---


@dataclass
class AdamMoments:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    moments: AdamMoments,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
    weight_decay: float = 0.0,
) -> Tuple[Dict[str, np.ndarray], AdamMoments]:
    """Bias-corrected Adam, updating ``params`` and ``moments`` in place.

    ``weight_decay`` adds weight_decay * p to each gradient before the moments
    are updated. Parameters without a gradient entry are left untouched.
    """
    if t < 1:
        raise ParameterError(f"Adam step counter starts at 1, got {t}")
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for key, p in params.items():
        g = grads.get(key)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient for {key} has shape {g.shape}, parameter {p.shape}")
        if weight_decay:
            g = g + weight_decay * p
        m = moments.m.setdefault(key, np.zeros_like(p))
        v = moments.v.setdefault(key, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return params, moments


def trainable_params(state: ModelState) -> Dict[str, np.ndarray]:
    """theta and alpha under one namespace, matching the tape's gradient names."""
    params = {f"theta/{k}": v for k, v in state.theta.items()}
    params.update({f"alpha/{k}": v for k, v in state.alpha.items()})
    return params


# --- log ---


@dataclass
class TrainLogRow:
    epoch: int
    step: int
    sup_f: float
    sup_w: float
    unsup_labeled: float
    unsup_unlabeled: float
    cons: float
    pi: float
    total: float
    lr: float
    lambda1: float
    lambda2: float
    lambda3: float
    pi_weight: float
    wall_time: float


LOG_COLUMNS = [f.name for f in fields(TrainLogRow)]
LOSS_COLUMNS = ["sup_f", "sup_w", "unsup_labeled", "unsup_unlabeled", "cons", "pi", "total"]
WEIGHT_COLUMNS = ("lambda1", "lambda2", "lambda3", "pi_weight")
WEIGHT_LABELS = {"lambda1": "l1", "lambda2": "l2", "lambda3": "l3", "pi_weight": "pi_w"}


def summarize_epoch(rows: Sequence[TrainLogRow]) -> dict:
    last = rows[-1]
    summary = {"epoch": last.epoch, "steps": len(rows)}
    for col in LOSS_COLUMNS:
        summary[col] = float(np.mean([getattr(r, col) for r in rows]))
    for col in ("lr",) + WEIGHT_COLUMNS + ("wall_time",):
        summary[col] = getattr(last, col)
    return summary


@dataclass
class TrainLog:
    rows: List[TrainLogRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: TrainLogRow) -> None:
        self.rows.append(row)

    def epoch_summaries(self) -> List[dict]:
        """Per-epoch means of the loss columns plus the weights and elapsed time at epoch end.

        Epochs are 0-based, as in the step log.
        """
        by_epoch: Dict[int, List[TrainLogRow]] = {}
        for row in self.rows:
            by_epoch.setdefault(row.epoch, []).append(row)
        return [summarize_epoch(by_epoch[epoch]) for epoch in sorted(by_epoch)]

    def write_csv(self, path: Path, include_timing: bool = False) -> None:
        """One row per step. Wall time is left out unless asked for, so reruns are byte-identical."""
        columns = LOG_COLUMNS if include_timing else [c for c in LOG_COLUMNS if c != "wall_time"]
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(columns)
            for row in self.rows:
                values = asdict(row)
                writer.writerow([repr(float(values[c])) if isinstance(values[c], float) else values[c] for c in columns])

    def write_epoch_json(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.epoch_summaries(), indent=2))


def read_log_csv(path: Path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            {k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]


# --- loop ---

# objective(batch, state, schedule, noise_rng, tape) -> (loss node, parts)
Objective = Callable[[TrainingBatch, ModelState, Schedule, np.random.Generator, Tape], Tuple[Node, Dict[str, float]]]


def full_objective(batch, state, schedule, rng, tape):
    breakdown = combined_loss(batch, state, schedule.weights, rng=rng, training=True, tape=tape)
    return breakdown.node, breakdown.parts()


def build_initial_state(ds: Dataset, cfg: TrainConfig, seed) -> ModelState:
    g_spec, h_spec = toy_feature_specs(ds.X.shape[1], cfg.hidden, ds.n_classes)
    phi_spec = toy_similarity_spec(cfg.hidden, cfg.phi_dropout)
    return init_model_state(g_spec, h_spec, phi_spec, seed, cfg.ema_decay)


def full_weights(cfg: TrainConfig) -> Tuple[str, ...]:
    """Weights the full objective applies; the Pi weight only when it is switched on."""
    names = ("lambda1", "lambda2", "lambda3")
    return names + ("pi_weight",) if cfg.pi_weight_max > 0 else names


def run_training(
    ds: Dataset,
    cfg: TrainConfig,
    objective: Objective,
    tag: str = "train",
    applied: Optional[Sequence[str]] = None,
) -> Tuple[ModelState, TrainLog]:
    """Shared loop for the full method and the baselines.

    One seed yields three independent streams (initialization, batches,
    dropout noise), so every objective sees the same batch sequence.
    ``applied`` names the weights the objective uses; the others are logged as 0.
    """
    cfg.validate()
    if ds.n_labeled == 0:
        raise ad.ContractError("dataset has no labeled subset; call select_labeled first")
    applied = tuple(full_weights(cfg) if applied is None else applied)
    init_seed, data_seed, noise_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    state = build_initial_state(ds, cfg, init_seed)
    data_rng = np.random.default_rng(data_seed)
    noise_rng = np.random.default_rng(noise_seed)
    log = TrainLog()
    if cfg.epochs == 0:
        logger.info(f"[{tag}] epochs=0, returning the initialized model")
        return state, log

    moments = AdamMoments()
    params = trainable_params(state)
    steps = epoch_schedule(ds, cfg.spec)
    logger.info(
        f"[{tag}] {ds.meta.name}: n={ds.n}, labeled={ds.n_labeled}, epochs={cfg.epochs}, "
        f"steps/epoch={steps}, batch={cfg.spec.b1}/{cfg.spec.b2}/{cfg.spec.b3}, seed={cfg.seed}"
    )
    start = time.perf_counter()
    t = 0
    for epoch in progress_iter(range(cfg.epochs), enabled=cfg.progress, desc=f"  {tag}", leave=False):
        schedule = schedule_at(cfg, epoch, ds.n_labeled, ds.n)
        logged = {name: getattr(schedule.weights, name) if name in applied else 0.0 for name in WEIGHT_COLUMNS}
        epoch_rows: List[TrainLogRow] = []
        for x1_idx in epoch_indices(ds, cfg.spec, data_rng):
            t += 1
            batch = build_batch(ds, cfg.spec, cfg.aug_sigma, data_rng, x1_idx=x1_idx)
            tape = Tape()
            try:
                loss, parts = objective(batch, state, schedule, noise_rng, tape)
            except NonFiniteError as exc:
                raise TrainingAborted(exc.term or exc.op or "loss", epoch, t, str(exc)) from exc
            grads = ad.backward(loss)
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainingAborted(f"gradient {name}", epoch, t)
            adam_step(
                params, grads, moments, schedule.lr, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps, t,
                weight_decay=cfg.adam.weight_decay,
            )
            ema_update(state, cfg.ema_decay)
            row = TrainLogRow(
                epoch=epoch, step=t,
                sup_f=parts.get("sup_f", 0.0), sup_w=parts.get("sup_w", 0.0),
                unsup_labeled=parts.get("unsup_labeled", 0.0), unsup_unlabeled=parts.get("unsup_unlabeled", 0.0),
                cons=parts.get("cons", 0.0), pi=parts.get("pi", 0.0), total=parts["total"],
                lr=schedule.lr, wall_time=time.perf_counter() - start, **logged,
            )
            log.append(row)
            epoch_rows.append(row)
            logger.debug(f"[{tag}] epoch {epoch} step {t} total={parts['total']:.6f}")
        summary = summarize_epoch(epoch_rows)
        weights = " ".join(f"{WEIGHT_LABELS[name]}={logged[name]:.4g}" for name in applied)
        logger.info(
            f"[{tag}] epoch {epoch}/{cfg.epochs - 1} total={summary['total']:.4f} "
            f"sup_f={summary['sup_f']:.4f} sup_w={summary['sup_w']:.4f} lr={schedule.lr:.2e} {weights}".rstrip()
        )
    logger.info(f"[{tag}] finished {t} steps in {time.perf_counter() - start:.1f}s")
    return state, log


def train(ds: Dataset, cfg: TrainConfig) -> Tuple[ModelState, TrainLog]:
    """Joint training of the feature and similarity networks on the full objective."""
    return run_training(ds, cfg, full_objective, tag="train")
