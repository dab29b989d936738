"""
Read-only evaluation of a trained ModelState: test error, learned similarity
matrices and their distance to the ideal block structure, k-NN queries under
the learned similarity or a Gaussian kernel, and decision-boundary grids.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from lib.autodiff import ContractError, Matrix, ParameterError
from lib.datasets import Dataset, moon_tip_points
from lib.networks import ModelState, latent, pair_similarity, predict_proba

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-10
MEASURES = ("learned", "gaussian")


def predict_labels(state: ModelState, X) -> np.ndarray:
    # np.argmax resolves ties to the lowest class index
    return np.argmax(predict_proba(state, X), axis=1)


def error_rate(state: ModelState, ds_test: Dataset) -> float:
    """Percentage of test samples whose argmax prediction differs from the label."""
    if ds_test.n == 0:
        return 0.0
    wrong = predict_labels(state, ds_test.X) != ds_test.y
    return float(100.0 * np.mean(wrong))


def tip_accuracy(state: ModelState) -> float:
    """Fraction of the two inner moon tips assigned to their own moon."""
    X, y = moon_tip_points()
    return float(np.mean(predict_labels(state, X) == y))


# --- similarity matrices ---


@dataclass
class SimilarityMatrix:
    """m x m pair scores with rows/cols ordered by class label."""

    S: Matrix
    sample_idx: np.ndarray
    labels: np.ndarray
    kind: str = "learned"

    @property
    def m(self) -> int:
        return self.S.shape[0]

    def ideal(self) -> Matrix:
        return ideal_matrix(self.labels)


def _class_order(ds: Dataset, sample_idx: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(sample_idx, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ParameterError("similarity matrix needs at least one sample")
    if idx.min() < 0 or idx.max() >= ds.n:
        raise IndexError(f"sample index out of range for a dataset of {ds.n}")
    labels = ds.y[idx]
    order = np.argsort(labels, kind="stable")
    return idx[order], labels[order]


def ideal_matrix(labels) -> Matrix:
    labels = np.asarray(labels)
    return (labels[:, None] == labels[None, :]).astype(np.float64)


def similarity_matrix(
    state: ModelState, ds: Dataset, sample_idx: Sequence[int], symmetrize: bool = False
) -> SimilarityMatrix:
    """S_ij = Phi(z_i, z_j)[0] in eval mode, for every ordered pair of the sample."""
    idx, labels = _class_order(ds, sample_idx)
    m = idx.size
    Z = latent(state, ds.X[idx])
    scores = pair_similarity(state, np.repeat(Z, m, axis=0), np.tile(Z, (m, 1)))
    S = scores.reshape(m, m)
    if symmetrize:
        S = 0.5 * (S + S.T)
    return SimilarityMatrix(S=S, sample_idx=idx, labels=labels, kind="learned")


def assigned_matrix(state: ModelState, ds: Dataset, sample_idx: Sequence[int]) -> SimilarityMatrix:
    """0-1 comparator: 1 where the two samples share a predicted class."""
    idx, labels = _class_order(ds, sample_idx)
    pred = predict_labels(state, ds.X[idx])
    return SimilarityMatrix(S=ideal_matrix(pred), sample_idx=idx, labels=labels, kind="assigned")


def mse_vs_ideal(sim: SimilarityMatrix) -> float:
    return float(np.mean((sim.S - sim.ideal()) ** 2))


def class_similarity_means(sim: SimilarityMatrix) -> Tuple[float, float]:
    """(mean within-class score, mean between-class score); NaN when a block is empty."""
    same = sim.ideal().astype(bool)
    within = float(sim.S[same].mean()) if same.any() else float("nan")
    between = float(sim.S[~same].mean()) if (~same).any() else float("nan")
    return within, between


class PsdReport(BaseModel):
    min_eigenvalue: float
    negative_mass: float = Field(..., description="Sum of |lambda| over negative eigenvalues.")
    is_psd: bool


def psd_report(sim, tol: float = PSD_TOLERANCE) -> PsdReport:
    """Spectrum check of the symmetric part of S."""
    S = sim.S if isinstance(sim, SimilarityMatrix) else np.asarray(sim, dtype=np.float64)
    eig = np.linalg.eigvalsh(0.5 * (S + S.T))
    negative = eig[eig < 0]
    return PsdReport(
        min_eigenvalue=float(eig.min()),
        negative_mass=float(-negative.sum()) if negative.size else 0.0,
        is_psd=bool(eig.min() >= -tol),
    )


# --- k-NN ---


class Neighbor(BaseModel):
    index: int
    score: float
    label: int


class QueryResult(BaseModel):
    target: int
    target_label: int
    measure: str
    k: int
    neighbors: List[Neighbor] = Field(default_factory=list)

    def same_class_count(self) -> int:
        return sum(1 for nb in self.neighbors if nb.label == self.target_label)


def knn_query(
    state: ModelState,
    ds: Dataset,
    target: int,
    k: int,
    measure: str = "learned",
    beta: float = 3.0,
    symmetrize: bool = False,
) -> QueryResult:
    """Top-k samples by score against ``target``, excluding the target; ties go to the lower index."""
    if not 0 <= target < ds.n:
        raise IndexError(f"target {target} out of range for a dataset of {ds.n}")
    if not 1 <= k < ds.n:
        raise ParameterError(f"k must be in [1, {ds.n - 1}], got {k}")
    if measure not in MEASURES:
        raise ParameterError(f"unknown measure '{measure}', expected one of {MEASURES}")

    if measure == "learned":
        Z = latent(state, ds.X)
        Zt = np.repeat(Z[target:target + 1], ds.n, axis=0)
        scores = pair_similarity(state, Zt, Z)
        if symmetrize:
            scores = 0.5 * (scores + pair_similarity(state, Z, Zt))
    else:
        if beta <= 0:
            raise ParameterError(f"beta must be > 0, got {beta}")
        d2 = np.sum((ds.X - ds.X[target]) ** 2, axis=1)
        scores = np.exp(-beta * d2)

    candidates = np.delete(np.arange(ds.n), target)
    cand_scores = scores[candidates]
    order = np.lexsort((candidates, -cand_scores))[:k]
    neighbors = [
        Neighbor(index=int(candidates[i]), score=float(cand_scores[i]), label=int(ds.y[candidates[i]]))
        for i in order
    ]
    return QueryResult(target=int(target), target_label=int(ds.y[target]), measure=measure, k=k, neighbors=neighbors)


# --- decision grid ---


@dataclass
class DecisionGrid:
    xs: np.ndarray
    ys: np.ndarray
    points: Matrix
    proba: Matrix

    @property
    def resolution(self) -> int:
        return self.xs.size

    def labels(self) -> np.ndarray:
        return np.argmax(self.proba, axis=1)


def default_bounds(ds: Dataset, margin: float = 0.5) -> Tuple[float, float, float, float]:
    lo, hi = ds.X.min(axis=0), ds.X.max(axis=0)
    return float(lo[0] - margin), float(hi[0] + margin), float(lo[1] - margin), float(hi[1] + margin)


def decision_grid(
    state: ModelState, bounds: Tuple[float, float, float, float], resolution: int
) -> DecisionGrid:
    """Class probabilities on a resolution x resolution lattice; x varies fastest."""
    if state.g_spec.in_dim != 2:
        raise ContractError(f"decision grids need a 2-D input model, got width {state.g_spec.in_dim}")
    if resolution < 1:
        raise ParameterError(f"resolution must be >= 1, got {resolution}")
    x_min, x_max, y_min, y_max = bounds
    xs = np.linspace(x_min, x_max, resolution)
    ys = np.linspace(y_min, y_max, resolution)
    gx, gy = np.meshgrid(xs, ys)
    points = np.column_stack([gx.ravel(), gy.ravel()])
    return DecisionGrid(xs=xs, ys=ys, points=points, proba=predict_proba(state, points))


# --- writers ---


def write_grid_csv(grid: DecisionGrid, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["x", "y"] + [f"p_class{c}" for c in range(grid.proba.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for point, p in zip(grid.points, grid.proba):
            writer.writerow([repr(float(v)) for v in (*point, *p)])


def read_grid_csv(path: Path) -> Tuple[Matrix, Matrix]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :2], data[:, 2:]


def write_similarity_csv(sim: SimilarityMatrix, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        for row in sim.S:
            writer.writerow([repr(float(v)) for v in row])


def read_similarity_csv(path: Path) -> Matrix:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_similarity_json(sim: SimilarityMatrix, path: Path, extra: Optional[dict] = None) -> None:
    """Ordering sidecar for the CSV, with the matrix diagnostics."""
    within, between = class_similarity_means(sim)
    payload = {
        "kind": sim.kind,
        "m": sim.m,
        "sample_idx": sim.sample_idx.tolist(),
        "labels": sim.labels.tolist(),
        "mse_vs_ideal": mse_vs_ideal(sim),
        "mean_within_class": within,
        "mean_between_class": between,
        "psd": psd_report(sim).model_dump(),
    }
    if extra:
        payload.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))


def write_queries_json(results: List[QueryResult], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.model_dump() for r in results], indent=2))
