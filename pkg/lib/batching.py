"""
Three-child training batches:

- batch1: (X1, Augment(X1)) virtual similar pairs drawn from the whole dataset
- batch2: (Xl1, Xl2) two independent draws from the labeled subset
- batch3: a random equal split of X1 into (X2, X3)

Every input also gets a freshly perturbed copy, consumed by the EMA
consistency target and the Pi-model term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from lib.autodiff import ContractError, Matrix, ParameterError
from lib.datasets import Dataset, augment

logger = logging.getLogger(__name__)

SIMILAR = np.array([1.0, 0.0])
DISSIMILAR = np.array([0.0, 1.0])


def similarity_targets(same) -> Matrix:
    """Boolean same-class flags -> one-hot rows [1,0] (similar) / [0,1] (dissimilar)."""
    same = np.asarray(same, dtype=bool).reshape(-1)
    return np.where(same[:, None], SIMILAR, DISSIMILAR)


@dataclass(frozen=True)
class BatchSpec:
    b1: int
    b2: int
    b3: Optional[int] = None

    def __post_init__(self):
        if self.b1 <= 0 or self.b1 % 2:
            raise ParameterError(f"b1 must be a positive even count, got {self.b1}")
        if self.b2 <= 0:
            raise ParameterError(f"b2 must be positive, got {self.b2}")
        if self.b3 is None:
            object.__setattr__(self, "b3", self.b1 // 2)
        elif self.b3 != self.b1 // 2:
            raise ParameterError(f"b3 is a split of batch1 and must equal b1/2={self.b1 // 2}, got {self.b3}")


TOY_BATCH_SPEC = BatchSpec(20, 6, 10)
# batch sizes used for the image benchmarks
IMAGE_BATCH_SPEC = BatchSpec(100, 10, 50)


@dataclass
class TrainingBatch:
    x1: Matrix
    x1_aug: Matrix
    xl1: Matrix
    xl2: Matrix
    yl1: np.ndarray
    yl2: np.ndarray
    split_left: np.ndarray
    split_right: np.ndarray
    x1_pert: Matrix
    x1_aug_pert: Matrix
    xl1_pert: Matrix
    xl2_pert: Matrix

    @property
    def b1(self) -> int:
        return self.x1.shape[0]

    @property
    def b2(self) -> int:
        return self.xl1.shape[0]

    @property
    def b3(self) -> int:
        return self.split_left.size

    @property
    def targets1(self) -> Matrix:
        return similarity_targets(np.ones(self.b1, dtype=bool))

    @property
    def targets2(self) -> Matrix:
        return similarity_targets(self.yl1 == self.yl2)

    @property
    def x2(self) -> Matrix:
        return self.x1[self.split_left]

    @property
    def x3(self) -> Matrix:
        return self.x1[self.split_right]


def build_batch(
    ds: Dataset,
    spec: BatchSpec,
    aug_sigma: float,
    rng: np.random.Generator,
    x1_idx: Optional[np.ndarray] = None,
) -> TrainingBatch:
    """Assemble one training batch; ``x1_idx`` comes from the epoch permutation when given."""
    if ds.n < spec.b1:
        raise ContractError(f"dataset has {ds.n} samples, batch1 needs {spec.b1}")
    if ds.n_labeled < spec.b2:
        raise ContractError(f"{ds.n_labeled} labeled samples cannot fill a batch2 draw of {spec.b2}")
    if x1_idx is None:
        x1_idx = rng.choice(ds.n, size=spec.b1, replace=False)
    x1_idx = np.asarray(x1_idx, dtype=np.int64)
    if x1_idx.size != spec.b1:
        raise ContractError(f"batch1 index list has {x1_idx.size} entries, spec says {spec.b1}")

    x1 = ds.X[x1_idx]
    x1_aug = augment(x1, aug_sigma, rng)
    order = rng.permutation(spec.b1)
    half = spec.b1 // 2
    idx_l1 = rng.choice(ds.labeled_idx, size=spec.b2, replace=False)
    idx_l2 = rng.choice(ds.labeled_idx, size=spec.b2, replace=False)
    xl1, xl2 = ds.X[idx_l1], ds.X[idx_l2]

    return TrainingBatch(
        x1=x1,
        x1_aug=x1_aug,
        xl1=xl1,
        xl2=xl2,
        yl1=ds.y[idx_l1],
        yl2=ds.y[idx_l2],
        split_left=order[:half],
        split_right=order[half:],
        x1_pert=augment(x1, aug_sigma, rng),
        x1_aug_pert=augment(x1_aug, aug_sigma, rng),
        xl1_pert=augment(xl1, aug_sigma, rng),
        xl2_pert=augment(xl2, aug_sigma, rng),
    )


def epoch_schedule(ds: Dataset, spec: BatchSpec) -> int:
    """Steps per epoch: one epoch is batch1 traversing every sample once."""
    return math.ceil(ds.n / spec.b1)


def epoch_indices(ds: Dataset, spec: BatchSpec, rng: np.random.Generator) -> np.ndarray:
    """(steps, b1) batch1 indices cycling one shuffled permutation of the dataset.

    When b1 does not divide n the last row wraps to the start of the permutation.
    """
    steps = epoch_schedule(ds, spec)
    perm = rng.permutation(ds.n)
    return np.resize(perm, steps * spec.b1).reshape(steps, spec.b1)
