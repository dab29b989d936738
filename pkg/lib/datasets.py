"""
Toy datasets (two moons, two circles), balanced labeled subsets, and the
Gaussian-noise augmentation used as input perturbation.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from lib.autodiff import Matrix, ParameterError

logger = logging.getLogger(__name__)

CSV_HEADER = ["x0", "x1", "y", "labeled"]


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    sigma: float
    seed: int


@dataclass
class Dataset:
    X: Matrix
    y: np.ndarray
    n_classes: int
    meta: DatasetMeta
    labeled_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_idx.size)

    @property
    def labeled_mask(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[self.labeled_idx] = True
        return mask

    @property
    def unlabeled_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.labeled_mask)


@dataclass(frozen=True)
class LabelMatrix:
    Y: Matrix

    @classmethod
    def from_labels(cls, labels, n_classes: int) -> "LabelMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        Y = np.zeros((labels.size, n_classes))
        Y[np.arange(labels.size), labels] = 1.0
        return cls(Y)


def _check_even(n: int, sigma: float) -> None:
    if n <= 0 or n % 2:
        raise ParameterError(f"n must be a positive even count, got {n}")
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")


def make_two_moons(n: int, sigma: float, seed: int) -> Dataset:
    _check_even(n, sigma)
    rng = np.random.default_rng(seed)
    half = n // 2
    t_upper = rng.uniform(0.0, np.pi, half)
    t_lower = rng.uniform(0.0, np.pi, half)
    upper = np.column_stack([np.cos(t_upper), np.sin(t_upper)])
    lower = np.column_stack([1.0 - np.cos(t_lower), 0.5 - np.sin(t_lower)])
    X = np.vstack([upper, lower]) + sigma * rng.standard_normal((n, 2))
    y = np.repeat(np.arange(2, dtype=np.int64), half)
    return Dataset(X=X, y=y, n_classes=2, meta=DatasetMeta("two_moons", float(sigma), int(seed)))


def make_two_circles(n: int, sigma: float, seed: int) -> Dataset:
    _check_even(n, sigma)
    rng = np.random.default_rng(seed)
    half = n // 2
    angles = rng.uniform(0.0, 2.0 * np.pi, n)
    radii = np.repeat([1.0, 0.5], half)
    X = radii[:, None] * np.column_stack([np.cos(angles), np.sin(angles)])
    X = X + sigma * rng.standard_normal((n, 2))
    y = np.repeat(np.arange(2, dtype=np.int64), half)
    return Dataset(X=X, y=y, n_classes=2, meta=DatasetMeta("two_circles", float(sigma), int(seed)))


GENERATORS: Dict[str, Callable[[int, float, int], Dataset]] = {
    "two_moons": make_two_moons,
    "two_circles": make_two_circles,
}


def make_dataset(name: str, n: int, sigma: float, seed: int) -> Dataset:
    try:
        generator = GENERATORS[name]
    except KeyError:
        raise ParameterError(f"unknown dataset '{name}' (known: {sorted(GENERATORS)})") from None
    return generator(n, sigma, seed)


def select_labeled(ds: Dataset, l: int, seed: int) -> Dataset:
    """Return a copy of ``ds`` with l/c labeled indices drawn per class."""
    if l <= 0 or l > ds.n:
        raise ParameterError(f"labeled count must be in [1, {ds.n}], got {l}")
    if l % ds.n_classes:
        raise ParameterError(f"labeled count {l} is not divisible by {ds.n_classes} classes")
    per_class = l // ds.n_classes
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.y == c)
        if members.size < per_class:
            raise ParameterError(f"class {c} has {members.size} samples, need {per_class}")
        chosen.append(np.sort(rng.choice(members, size=per_class, replace=False)))
    labeled = np.concatenate(chosen).astype(np.int64)
    logger.debug(f"[data] {ds.meta.name}: labeled {per_class} per class ({l} total)")
    return replace(ds, labeled_idx=labeled)


def label_matrix(ds: Dataset) -> LabelMatrix:
    return LabelMatrix.from_labels(ds.y[ds.labeled_idx], ds.n_classes)


def augment(x: Matrix, noise_sigma: float, rng: np.random.Generator) -> Matrix:
    """x plus i.i.d. N(0, noise_sigma^2) noise; always draws so the stream layout is fixed."""
    if noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
    x = np.asarray(x, dtype=np.float64)
    return x + noise_sigma * rng.standard_normal(x.shape)


def moon_tip_points() -> Tuple[Matrix, np.ndarray]:
    """The inside end of each moon with its class: the points a good boundary must bend around."""
    X = np.array([[1.0, 0.0], [0.0, 0.5]])
    y = np.array([0, 1], dtype=np.int64)
    return X, y


def write_csv(ds: Dataset, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    mask = ds.labeled_mask
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for i in range(ds.n):
            writer.writerow([repr(float(ds.X[i, 0])), repr(float(ds.X[i, 1])), int(ds.y[i]), int(mask[i])])


def load_csv(path: Path, name: Optional[str] = None, n_classes: Optional[int] = None) -> Dataset:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ParameterError(f"{path}: expected header {CSV_HEADER}, got {reader.fieldnames}")
        rows = list(reader)
    X = np.array([[float(r["x0"]), float(r["x1"])] for r in rows]).reshape(-1, 2)
    y = np.array([int(r["y"]) for r in rows], dtype=np.int64)
    labeled = np.array([i for i, r in enumerate(rows) if r["labeled"] == "1"], dtype=np.int64)
    classes = n_classes if n_classes is not None else int(y.max()) + 1 if y.size else 0
    meta = DatasetMeta(name or Path(path).stem, float("nan"), -1)
    return Dataset(X=X, y=y, n_classes=classes, meta=meta, labeled_idx=labeled)
