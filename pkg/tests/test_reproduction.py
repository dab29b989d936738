"""Toy-benchmark runs at full scale. Each module fixture trains three methods on five seeds."""

import json
import logging
from pathlib import Path

import numpy as np
import pytest

from lib.experiment import cmd_ablate

pytestmark = pytest.mark.slow

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def ablate(config_name: str, tmp_dir: Path):
    data = json.loads((CONFIGS / config_name).read_text())
    data["method"] = {"kind": "full"}
    path = tmp_dir / config_name
    path.write_text(json.dumps(data))
    root = logging.getLogger()
    handlers = list(root.handlers)
    try:
        summaries = cmd_ablate(path, out=tmp_dir / "out")
    finally:
        for handler in root.handlers:
            if handler not in handlers:
                handler.close()
        root.handlers = handlers
    return summaries


@pytest.fixture(scope="module")
def moons_ablation(tmp_path_factory):
    return ablate("two_moons.json", tmp_path_factory.mktemp("moons"))


@pytest.fixture(scope="module")
def circles_ablation(tmp_path_factory):
    return ablate("two_circles.json", tmp_path_factory.mktemp("circles"))


def test_moons_method_ordering(moons_ablation):
    full = moons_ablation["full_method"].mean_error
    pi = moons_ablation["pi_model"].mean_error
    supervised = moons_ablation["supervised_only"].mean_error
    assert full < pi
    assert full < supervised
    assert pi <= supervised


def test_moons_tips_follow_their_moon(moons_ablation):
    tips = [s.tip_accuracy for s in moons_ablation["full_method"].seeds]
    assert sum(t == 1.0 for t in tips) >= 4


def test_moons_learned_neighbors_share_class(moons_ablation):
    knn = [s.knn_same_class for s in moons_ablation["full_method"].seeds]
    assert np.mean(knn) >= 0.8 * 9


def test_moons_similarity_separates_classes(moons_ablation):
    for s in moons_ablation["full_method"].seeds:
        assert s.mean_within_class > 0.5
        assert s.mean_between_class < 0.5


def test_moons_learned_matrix_beats_label_assignment(moons_ablation):
    seeds = moons_ablation["full_method"].seeds
    wins = sum(s.mse_vs_ideal < s.mse_assigned for s in seeds)
    assert wins > len(seeds) // 2


def test_circles_method_ordering(circles_ablation):
    full = circles_ablation["full_method"].mean_error
    assert full < circles_ablation["pi_model"].mean_error
    assert full < circles_ablation["supervised_only"].mean_error
    assert circles_ablation["pi_model"].mean_error <= circles_ablation["supervised_only"].mean_error
