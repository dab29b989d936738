"""
Config-driven experiment driver: multi-seed runs, ablation tables, and
plot-data export from a finished run directory.

Output layout per experiment::

    <out>/<name>/config.json, experiment_run_<ts>.log, summary.json
    <out>/<name>/<seed>/{config.json, dataset.csv, train_log.csv,
                         epoch_summary.json, model.bin, summary.json, eval/}
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from lib.autodiff import SimGraphError
from lib.baselines import BaselineKind, train_baseline
from lib.batching import BatchSpec
from lib.datasets import Dataset, load_csv, make_dataset, select_labeled, write_csv
from lib import evaluation as ev
from lib.logging_config import setup_logging
from lib.networks import ModelState, load_state, save_state
from lib.trainer import AdamConfig, LOSS_COLUMNS, RampConfig, TrainConfig, progress_iter, read_log_csv

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "SIMGRAPH_OUTPUT_ROOT"
TEST_SEED_OFFSET = 10_000
METHOD_KINDS = {
    "full": BaselineKind.full_method,
    "pi": BaselineKind.pi_model,
    "supervised": BaselineKind.supervised_only,
}
ABLATION_KINDS = [BaselineKind.supervised_only, BaselineKind.pi_model, BaselineKind.full_method]
REQUIRED_ARTIFACTS = ("config.json", "dataset.csv", "train_log.csv", "model.bin")


class MissingArtifacts(SimGraphError):
    def __init__(self, missing: List[Path]):
        super().__init__(f"{len(missing)} required artifact(s) missing")
        self.missing = missing


# --- config ---


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetBlock(_Block):
    name: Literal["two_moons", "two_circles"] = "two_moons"
    n: int = Field(1000, gt=0)
    sigma: float = Field(0.1, ge=0)
    l: int = Field(6, gt=0, description="Labeled samples, split evenly across classes.")
    n_test: int = Field(1000, ge=0)
    seed: int = Field(0, description="Base seed; seed index i runs with seed + i.")

    @model_validator(mode="after")
    def _check_counts(self):
        if self.n % 2:
            raise ValueError(f"n must be even, got {self.n}")
        if self.n_test % 2:
            raise ValueError(f"n_test must be even, got {self.n_test}")
        if self.l > self.n or self.l % 2:
            raise ValueError(f"l must be an even count <= n, got {self.l}")
        return self


class MethodBlock(_Block):
    kind: Literal["full", "pi", "supervised"] = "full"
    ablate_cons: bool = False
    ablate_pi_similarity: bool = False

    @property
    def baseline_kind(self) -> BaselineKind:
        return METHOD_KINDS[self.kind]


class BatchBlock(_Block):
    b1: int = 20
    b2: int = 6
    b3: Optional[int] = None


class RampBlock(_Block):
    lambda13_rampup_epochs: int = 80
    lambda2_zero_until: int = 100
    lambda2_rampup_epochs: int = 50
    lr_rampup_epochs: int = 80


class AdamBlock(_Block):
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = Field(5e-4, ge=0)


class TrainBlock(_Block):
    beta: float = 3.0
    k1: float = 3.0
    k2: float = 3.0
    lambda3_max: float = 0.15
    epochs: int = 200
    lr_max: float = 1e-3
    ema_decay: float = 0.99
    aug_sigma: float = 0.05
    hidden: int = 100
    phi_dropout: float = 0.2
    pi_weight_max: float = 0.0
    unsup_repulsion: bool = True
    batch: BatchBlock = Field(default_factory=BatchBlock)
    ramp: RampBlock = Field(default_factory=RampBlock)
    adam: AdamBlock = Field(default_factory=AdamBlock)

    def to_train_config(self, seed: int = 0, progress: bool = False) -> TrainConfig:
        data = self.model_dump(exclude={"batch", "ramp", "adam"})
        return TrainConfig(
            **data,
            spec=BatchSpec(**self.batch.model_dump()),
            ramp=RampConfig(**self.ramp.model_dump()),
            adam=AdamConfig(**self.adam.model_dump()),
            seed=seed,
            progress=progress,
        )

    @model_validator(mode="after")
    def _check_train_config(self):
        # ParameterError is a ValueError, so pydantic reports it as a field-level error
        self.to_train_config().validate()
        return self


class EvalBlock(_Block):
    sim_m: int = Field(200, gt=0, description="Samples in the similarity matrix.")
    knn_k: int = Field(9, gt=0)
    knn_queries: int = Field(20, ge=0)
    knn_beta: float = Field(3.0, gt=0)
    grid_bounds: Optional[Tuple[float, float, float, float]] = None
    grid_resolution: int = Field(100, gt=0)
    symmetrize: bool = False


class ExperimentConfig(_Block):
    name: str
    seeds: int = Field(5, gt=0)
    dataset: DatasetBlock = Field(default_factory=DatasetBlock)
    method: MethodBlock = Field(default_factory=MethodBlock)
    train: TrainBlock = Field(default_factory=TrainBlock)
    eval: EvalBlock = Field(default_factory=EvalBlock)
    output_dir: str = "outputs"

    @model_validator(mode="after")
    def _check_batches(self):
        if self.train.batch.b2 > self.dataset.l:
            raise ValueError(f"train.batch.b2={self.train.batch.b2} exceeds dataset.l={self.dataset.l}")
        if self.train.batch.b1 > self.dataset.n:
            raise ValueError(f"train.batch.b1={self.train.batch.b1} exceeds dataset.n={self.dataset.n}")
        return self


def load_config(path: Path) -> ExperimentConfig:
    return ExperimentConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))


def resolve_output_root(cfg: ExperimentConfig, out: Optional[Path] = None) -> Path:
    """``--out`` beats the environment, which beats the config file."""
    if out is not None:
        return Path(out)
    env = os.environ.get(OUTPUT_ROOT_ENV)
    if env:
        return Path(env)
    return Path(cfg.output_dir)


# --- summaries ---


class SeedResult(BaseModel):
    seed_index: int
    seed: int
    kind: str
    error_rate: float
    mse_vs_ideal: float
    mse_assigned: float
    mean_within_class: float
    mean_between_class: float
    knn_same_class: float
    tip_accuracy: Optional[float] = None
    steps: int
    wall_time: float


class RunSummary(BaseModel):
    experiment: str
    kind: str
    seeds: List[SeedResult]
    mean_error: float
    std_error: float
    mean_mse: float
    std_mse: float
    mean_wall_time: float

    @classmethod
    def aggregate(cls, experiment: str, kind: str, seeds: List[SeedResult]) -> "RunSummary":
        """Population mean and std (ddof=0) over the per-seed rows."""
        errors = np.array([s.error_rate for s in seeds])
        mses = np.array([s.mse_vs_ideal for s in seeds])
        return cls(
            experiment=experiment,
            kind=kind,
            seeds=seeds,
            mean_error=float(errors.mean()),
            std_error=float(errors.std()),
            mean_mse=float(mses.mean()),
            std_mse=float(mses.std()),
            mean_wall_time=float(np.mean([s.wall_time for s in seeds])),
        )


# --- per-seed pipeline ---


def build_datasets(cfg: ExperimentConfig, seed: int) -> Tuple[Dataset, Dataset]:
    d = cfg.dataset
    train_ds = select_labeled(make_dataset(d.name, d.n, d.sigma, seed), d.l, seed)
    test_ds = make_dataset(d.name, d.n_test, d.sigma, seed + TEST_SEED_OFFSET) if d.n_test else None
    return train_ds, test_ds


def evaluate_seed(state: ModelState, ds: Dataset, test_ds: Optional[Dataset], cfg: ExperimentConfig, seed: int, eval_dir: Path) -> dict:
    """Write the eval artifacts of one seed and return its metrics."""
    e = cfg.eval
    rng = np.random.default_rng(seed)
    sample_idx = rng.choice(ds.n, size=min(e.sim_m, ds.n), replace=False)

    sim = ev.similarity_matrix(state, ds, sample_idx, symmetrize=e.symmetrize)
    assigned = ev.assigned_matrix(state, ds, sample_idx)
    mse_assigned = ev.mse_vs_ideal(assigned)
    ev.write_similarity_csv(sim, eval_dir / "similarity_matrix.csv")
    ev.write_similarity_json(sim, eval_dir / "similarity_matrix.json", extra={"mse_assigned": mse_assigned})
    # class means of W are taken over held-out pairs when a test set exists
    if test_ds is not None:
        test_idx = rng.choice(test_ds.n, size=min(e.sim_m, test_ds.n), replace=False)
        within, between = ev.class_similarity_means(ev.similarity_matrix(state, test_ds, test_idx, symmetrize=e.symmetrize))
    else:
        within, between = ev.class_similarity_means(sim)

    queries: List[ev.QueryResult] = []
    if e.knn_queries and e.knn_k < ds.n:
        targets = rng.choice(ds.n, size=min(e.knn_queries, ds.n), replace=False)
        for target in targets:
            queries.append(ev.knn_query(state, ds, int(target), e.knn_k, "learned", symmetrize=e.symmetrize))
            queries.append(ev.knn_query(state, ds, int(target), e.knn_k, "gaussian", beta=e.knn_beta))
    ev.write_queries_json(queries, eval_dir / "knn_queries.json")
    learned = [q for q in queries if q.measure == "learned"]
    knn_same = float(np.mean([q.same_class_count() for q in learned])) if learned else float("nan")

    if state.g_spec.in_dim == 2:
        bounds = e.grid_bounds or ev.default_bounds(ds)
        ev.write_grid_csv(ev.decision_grid(state, bounds, e.grid_resolution), eval_dir / "decision_grid.csv")

    return {
        "error_rate": ev.error_rate(state, test_ds) if test_ds is not None else float("nan"),
        "mse_vs_ideal": ev.mse_vs_ideal(sim),
        "mse_assigned": mse_assigned,
        "mean_within_class": within,
        "mean_between_class": between,
        "knn_same_class": knn_same,
        "tip_accuracy": ev.tip_accuracy(state) if ds.meta.name == "two_moons" else None,
    }


def run_seed(cfg: ExperimentConfig, seed_index: int, seed_dir: Path, kind: BaselineKind) -> SeedResult:
    seed = cfg.dataset.seed + seed_index
    seed_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"[experiment] {cfg.name}/{kind.value}: seed {seed} -> {seed_dir}")
    resolved = {"experiment": cfg.model_dump(mode="json"), "seed_index": seed_index, "seed": seed, "kind": kind.value}
    (seed_dir / "config.json").write_text(json.dumps(resolved, indent=2))

    ds, test_ds = build_datasets(cfg, seed)
    write_csv(ds, seed_dir / "dataset.csv")

    start = time.perf_counter()
    state, log = train_baseline(ds, kind, cfg.train.to_train_config(seed=seed))
    wall_time = time.perf_counter() - start

    log.write_csv(seed_dir / "train_log.csv")
    log.write_epoch_json(seed_dir / "epoch_summary.json")
    save_state(state, seed_dir / "model.bin")

    metrics = evaluate_seed(state, ds, test_ds, cfg, seed, seed_dir / "eval")
    result = SeedResult(seed_index=seed_index, seed=seed, kind=kind.value, steps=len(log), wall_time=wall_time, **metrics)
    (seed_dir / "summary.json").write_text(result.model_dump_json(indent=2))
    logger.info(
        f"[experiment] seed {seed}: error={result.error_rate:.2f}% mse={result.mse_vs_ideal:.4f} "
        f"(0-1 assignment {result.mse_assigned:.4f}) in {wall_time:.1f}s"
    )
    return result


def _seed_worker(payload: Tuple[str, int, str, str]) -> dict:
    config_json, seed_index, seed_dir, kind = payload
    cfg = ExperimentConfig.model_validate_json(config_json)
    return run_seed(cfg, seed_index, Path(seed_dir), BaselineKind(kind)).model_dump()


def run_seeds(cfg: ExperimentConfig, base_dir: Path, kind: BaselineKind, parallel: int = 1) -> List[SeedResult]:
    """All seeds of one method; per-seed output directories are never shared."""
    indices = list(range(cfg.seeds))
    if parallel > 1 and len(indices) > 1:
        payloads = [(cfg.model_dump_json(), i, str(base_dir / str(cfg.dataset.seed + i)), kind.value) for i in indices]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_seed_worker, payload) for payload in payloads]
            results = []
            for i, future in zip(indices, futures):
                try:
                    results.append(SeedResult(**future.result()))
                except Exception as e:
                    logger.error(f"[experiment] seed index {i} failed: {e}", exc_info=True)
                    raise
            return results

    results = []
    for i in progress_iter(indices, desc=f"{cfg.name}/{kind.value}"):
        seed_dir = base_dir / str(cfg.dataset.seed + i)
        try:
            results.append(run_seed(cfg, i, seed_dir, kind))
        except Exception as e:
            logger.error(f"[experiment] seed index {i} failed: {e}", exc_info=True)
            raise
    return results


def _prepare(config_path: Path, seeds: Optional[int], out: Optional[Path], verbose: bool) -> Tuple[ExperimentConfig, Path]:
    cfg = load_config(config_path)
    if seeds is not None:
        cfg = cfg.model_copy(update={"seeds": seeds})
    exp_dir = resolve_output_root(cfg, out) / cfg.name
    setup_logging(exp_dir, verbose=verbose)
    shutil.copyfile(config_path, exp_dir / "config.json")
    return cfg, exp_dir


def describe_plan(cfg: ExperimentConfig, exp_dir: Path, ablate: bool = False) -> List[str]:
    kinds = ablation_kinds(cfg) if ablate else [cfg.method.baseline_kind]
    d, t = cfg.dataset, cfg.train
    return [
        f"experiment {cfg.name}: {d.name} n={d.n} sigma={d.sigma} l={d.l} n_test={d.n_test}",
        f"methods: {', '.join(k.value for k in kinds)}",
        f"seeds: {[d.seed + i for i in range(cfg.seeds)]}",
        f"epochs={t.epochs} lr_max={t.lr_max} batch={t.batch.b1}/{t.batch.b2}",
        f"output: {exp_dir}",
    ]


def cmd_run(
    config_path: Path,
    seeds: Optional[int] = None,
    out: Optional[Path] = None,
    parallel: int = 1,
    verbose: bool = False,
) -> RunSummary:
    cfg, exp_dir = _prepare(config_path, seeds, out, verbose)
    kind = cfg.method.baseline_kind
    logger.info(f"[experiment] {cfg.name}: {cfg.seeds} seed(s), method {kind.value}, output {exp_dir}")
    results = run_seeds(cfg, exp_dir, kind, parallel)
    summary = RunSummary.aggregate(cfg.name, kind.value, results)
    (exp_dir / "summary.json").write_text(summary.model_dump_json(indent=2))
    logger.info(
        f"[experiment] {cfg.name}: error {summary.mean_error:.2f} +- {summary.std_error:.2f}% "
        f"over {len(results)} seed(s), mse {summary.mean_mse:.4f} +- {summary.std_mse:.4f}"
    )
    return summary


# --- ablation ---


def ablation_kinds(cfg: ExperimentConfig) -> List[BaselineKind]:
    kinds = list(ABLATION_KINDS)
    if cfg.method.ablate_cons:
        kinds.append(BaselineKind.full_no_cons)
    if cfg.method.ablate_pi_similarity:
        kinds.append(BaselineKind.full_pi)
    return kinds


def render_ablation(summaries: Dict[str, RunSummary]) -> str:
    """Fixed-width text table: one row per variant, one column per seed, then mean +- std."""
    seeds = [s.seed for s in next(iter(summaries.values())).seeds]
    width = max(len(v) for v in summaries) + 2
    header = "variant".ljust(width) + "".join(f"{'seed ' + str(s):>12}" for s in seeds) + f"{'mean':>10}{'std':>10}"
    lines = [header, "-" * len(header)]
    for variant, summary in summaries.items():
        cells = "".join(f"{r.error_rate:>12.2f}" for r in summary.seeds)
        lines.append(variant.ljust(width) + cells + f"{summary.mean_error:>10.2f}{summary.std_error:>10.2f}")
    return "\n".join(lines) + "\n"


def write_ablation_csv(summaries: Dict[str, RunSummary], path: Path) -> None:
    seeds = [s.seed for s in next(iter(summaries.values())).seeds]
    lines = [",".join(["variant"] + [f"seed_{s}" for s in seeds] + ["mean", "std"])]
    for variant, summary in summaries.items():
        cells = [repr(r.error_rate) for r in summary.seeds]
        lines.append(",".join([variant] + cells + [repr(summary.mean_error), repr(summary.std_error)]))
    path.write_text("\n".join(lines) + "\n")


def cmd_ablate(
    config_path: Path,
    seeds: Optional[int] = None,
    out: Optional[Path] = None,
    parallel: int = 1,
    verbose: bool = False,
) -> Dict[str, RunSummary]:
    """Every variant on the same seeds; error rates tabulated per variant."""
    cfg, exp_dir = _prepare(config_path, seeds, out, verbose)
    summaries: Dict[str, RunSummary] = {}
    for kind in ablation_kinds(cfg):
        logger.info(f"[ablate] {cfg.name}: variant {kind.value}")
        results = run_seeds(cfg, exp_dir / "ablation" / kind.value, kind, parallel)
        summaries[kind.value] = RunSummary.aggregate(cfg.name, kind.value, results)

    ablation_dir = exp_dir / "ablation"
    write_ablation_csv(summaries, ablation_dir / "ablation.csv")
    table = render_ablation(summaries)
    (ablation_dir / "ablation.txt").write_text(table)
    (ablation_dir / "summary.json").write_text(
        json.dumps({k: v.model_dump() for k, v in summaries.items()}, indent=2)
    )
    logger.info(f"[ablate] {cfg.name}: error rates (%)\n{table}")
    return summaries


# --- plot-data export ---


def seed_dirs(run_dir: Path) -> List[Path]:
    """A seed directory itself, or every seed directory under an experiment directory."""
    run_dir = Path(run_dir)
    if (run_dir / "train_log.csv").exists() or (run_dir / "model.bin").exists():
        return [run_dir]
    found = sorted(
        (p for p in run_dir.rglob("config.json") if p.parent != run_dir and (p.parent / "dataset.csv").exists()),
        key=lambda p: str(p),
    )
    return [p.parent for p in found] or [run_dir]


def training_curve(rows: List[dict]) -> List[dict]:
    by_epoch: Dict[int, List[dict]] = {}
    for row in rows:
        by_epoch.setdefault(row["epoch"], []).append(row)
    return [
        {"epoch": epoch, **{c: float(np.mean([r[c] for r in group])) for c in LOSS_COLUMNS}}
        for epoch, group in sorted(by_epoch.items())
    ]


def write_training_curve(curve: List[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(["epoch"] + LOSS_COLUMNS)]
    for point in curve:
        lines.append(",".join([str(point["epoch"])] + [repr(point[c]) for c in LOSS_COLUMNS]))
    path.write_text("\n".join(lines) + "\n")


def export_seed(seed_dir: Path, render: bool = False) -> List[Path]:
    resolved = json.loads((seed_dir / "config.json").read_text())
    cfg = ExperimentConfig.model_validate(resolved["experiment"])
    seed = int(resolved["seed"])
    eval_dir = seed_dir / "eval"

    state = load_state(seed_dir / "model.bin")
    ds = load_csv(seed_dir / "dataset.csv", name=cfg.dataset.name, n_classes=state.n_classes)
    written = []

    curve_path = eval_dir / "training_curve.csv"
    write_training_curve(training_curve(read_log_csv(seed_dir / "train_log.csv")), curve_path)
    written.append(curve_path)

    grid_path = eval_dir / "decision_grid.csv"
    bounds = cfg.eval.grid_bounds or ev.default_bounds(ds)
    grid = ev.decision_grid(state, bounds, cfg.eval.grid_resolution)
    ev.write_grid_csv(grid, grid_path)
    written.append(grid_path)

    sim_path = eval_dir / "similarity_matrix.csv"
    if not sim_path.exists():
        rng = np.random.default_rng(seed)
        sample_idx = rng.choice(ds.n, size=min(cfg.eval.sim_m, ds.n), replace=False)
        sim = ev.similarity_matrix(state, ds, sample_idx, symmetrize=cfg.eval.symmetrize)
        ev.write_similarity_csv(sim, sim_path)
        ev.write_similarity_json(sim, eval_dir / "similarity_matrix.json")
    written.append(sim_path)

    if render:
        from lib import plotting

        written.append(plotting.render_decision_boundary(grid, ds, eval_dir / "decision_boundary.svg"))
        written.append(plotting.render_similarity_heatmap(ev.read_similarity_csv(sim_path), eval_dir / "similarity_matrix.svg"))
    return written


def cmd_export_plots(run_dir: Path, render: bool = False) -> List[Path]:
    dirs = seed_dirs(run_dir)
    missing = [d / name for d in dirs for name in REQUIRED_ARTIFACTS if not (d / name).exists()]
    if missing:
        for path in missing:
            logger.error(f"[export] missing {path}")
        raise MissingArtifacts(missing)
    written: List[Path] = []
    for seed_dir in progress_iter(dirs, desc="export"):
        written.extend(export_seed(seed_dir, render=render))
        logger.info(f"[export] {seed_dir}: plot data written")
    return written
