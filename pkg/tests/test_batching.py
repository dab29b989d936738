import numpy as np
import pytest

from lib.autodiff import ContractError, ParameterError
from lib.batching import (
    DISSIMILAR,
    IMAGE_BATCH_SPEC,
    SIMILAR,
    TOY_BATCH_SPEC,
    BatchSpec,
    build_batch,
    epoch_indices,
    epoch_schedule,
    similarity_targets,
)
from lib.datasets import make_two_moons, select_labeled


@pytest.fixture
def big_moons():
    return select_labeled(make_two_moons(6000, 0.15, seed=0), 12, seed=0)


class TestBatchSpec:
    def test_b3_derived(self):
        assert BatchSpec(20, 6).b3 == 10
        assert IMAGE_BATCH_SPEC.b3 == 50
        assert TOY_BATCH_SPEC.b3 == 10

    def test_odd_b1(self):
        with pytest.raises(ParameterError):
            BatchSpec(7, 2)

    def test_b3_must_split_b1(self):
        with pytest.raises(ParameterError):
            BatchSpec(20, 6, 8)


class TestBuildBatch:
    def test_image_benchmark_pair_counts(self, big_moons):
        batch = build_batch(big_moons, IMAGE_BATCH_SPEC, 0.05, np.random.default_rng(0))
        assert (batch.b1, batch.b2, batch.b3) == (100, 10, 50)
        assert batch.x1.shape == batch.x1_aug.shape == (100, 2)
        assert batch.xl1.shape == batch.xl2.shape == (10, 2)
        assert batch.x2.shape == batch.x3.shape == (50, 2)

    def test_split_partitions_batch1(self, big_moons):
        batch = build_batch(big_moons, IMAGE_BATCH_SPEC, 0.05, np.random.default_rng(1))
        both = np.concatenate([batch.split_left, batch.split_right])
        assert sorted(both.tolist()) == list(range(100))

    def test_batch2_draws_come_from_labeled_subset(self, big_moons):
        batch = build_batch(big_moons, TOY_BATCH_SPEC, 0.05, np.random.default_rng(2))
        label_of = {tuple(big_moons.X[i]): big_moons.y[i] for i in big_moons.labeled_idx}
        for rows, labels in ((batch.xl1, batch.yl1), (batch.xl2, batch.yl2)):
            assert [label_of[tuple(x)] for x in rows] == labels.tolist()

    def test_zero_augmentation_gives_twins(self, big_moons):
        batch = build_batch(big_moons, TOY_BATCH_SPEC, 0.0, np.random.default_rng(3))
        np.testing.assert_array_equal(batch.x1, batch.x1_aug)
        np.testing.assert_array_equal(batch.targets1, np.tile(SIMILAR, (20, 1)))

    def test_targets2_follow_labels(self, big_moons):
        batch = build_batch(big_moons, TOY_BATCH_SPEC, 0.05, np.random.default_rng(4))
        same = batch.yl1 == batch.yl2
        np.testing.assert_array_equal(batch.targets2[same], np.tile(SIMILAR, (same.sum(), 1)))
        np.testing.assert_array_equal(batch.targets2[~same], np.tile(DISSIMILAR, ((~same).sum(), 1)))

    def test_same_class_fraction(self, big_moons):
        rng = np.random.default_rng(5)
        same = 0
        draws = 0
        while draws < 10_000:
            batch = build_batch(big_moons, TOY_BATCH_SPEC, 0.05, rng)
            same += int(np.sum(batch.yl1 == batch.yl2))
            draws += batch.b2
        fraction = same / draws
        # binomial sd at p=0.5 over 1e4 draws is 0.005; batch2 draws are mildly correlated
        assert abs(fraction - 0.5) < 0.03

    def test_insufficient_labels(self):
        ds = select_labeled(make_two_moons(40, 0.1, seed=0), 4, seed=0)
        with pytest.raises(ContractError):
            build_batch(ds, TOY_BATCH_SPEC, 0.05, np.random.default_rng(0))

    def test_dataset_smaller_than_batch1(self):
        ds = select_labeled(make_two_moons(10, 0.1, seed=0), 10, seed=0)
        with pytest.raises(ContractError):
            build_batch(ds, TOY_BATCH_SPEC, 0.05, np.random.default_rng(0))

    def test_deterministic(self, big_moons):
        a = build_batch(big_moons, TOY_BATCH_SPEC, 0.05, np.random.default_rng(6))
        b = build_batch(big_moons, TOY_BATCH_SPEC, 0.05, np.random.default_rng(6))
        np.testing.assert_array_equal(a.x1_aug_pert, b.x1_aug_pert)
        np.testing.assert_array_equal(a.split_left, b.split_left)


class TestEpochSchedule:
    def test_image_benchmark_steps(self, big_moons):
        assert epoch_schedule(big_moons, IMAGE_BATCH_SPEC) == 60

    def test_single_step(self):
        ds = make_two_moons(20, 0.1, seed=0)
        assert epoch_schedule(ds, BatchSpec(20, 2)) == 1

    def test_epoch_covers_dataset(self):
        ds = make_two_moons(50, 0.1, seed=0)
        rows = epoch_indices(ds, BatchSpec(10, 2), np.random.default_rng(0))
        assert rows.shape == (5, 10)
        assert sorted(rows.ravel().tolist()) == list(range(50))

    def test_uneven_epoch_wraps(self):
        ds = make_two_moons(46, 0.1, seed=0)
        rows = epoch_indices(ds, BatchSpec(10, 2), np.random.default_rng(0))
        assert rows.shape == (5, 10)
        assert set(rows.ravel().tolist()) == set(range(46))


def test_similarity_targets():
    np.testing.assert_array_equal(similarity_targets([True, False]), [[1.0, 0.0], [0.0, 1.0]])
