import numpy as np
import pytest

from lib.autodiff import ParameterError
from lib.datasets import (
    augment,
    label_matrix,
    load_csv,
    make_dataset,
    make_two_circles,
    make_two_moons,
    moon_tip_points,
    select_labeled,
    write_csv,
)


class TestTwoMoons:
    def test_class_balance(self):
        ds = make_two_moons(6000, 0.15, seed=0)
        assert ds.X.shape == (6000, 2)
        assert np.bincount(ds.y).tolist() == [3000, 3000]
        assert ds.meta.sigma == 0.15
        assert ds.n_labeled == 0

    def test_noiseless_points_lie_on_the_curves(self):
        ds = make_two_moons(200, 0.0, seed=1)
        upper = ds.X[ds.y == 0]
        lower = ds.X[ds.y == 1]
        np.testing.assert_allclose(np.hypot(upper[:, 0], upper[:, 1]), 1.0, atol=1e-12)
        assert np.all(upper[:, 1] >= -1e-12)
        np.testing.assert_allclose(np.hypot(lower[:, 0] - 1.0, lower[:, 1] - 0.5), 1.0, atol=1e-12)
        assert np.all(lower[:, 1] <= 0.5 + 1e-12)

    def test_deterministic(self):
        a = make_two_moons(100, 0.1, seed=7)
        b = make_two_moons(100, 0.1, seed=7)
        assert a.X.tobytes() == b.X.tobytes()
        assert a.y.tobytes() == b.y.tobytes()

    def test_odd_n(self):
        with pytest.raises(ParameterError):
            make_two_moons(7, 0.1, seed=0)

    def test_tip_points_sit_on_the_noiseless_moons(self):
        X, y = moon_tip_points()
        assert np.hypot(*X[0]) == pytest.approx(1.0)
        assert np.hypot(X[1, 0] - 1.0, X[1, 1] - 0.5) == pytest.approx(1.0)
        assert y.tolist() == [0, 1]


class TestTwoCircles:
    def test_class_balance(self):
        ds = make_two_circles(6000, 0.3, seed=0)
        assert np.bincount(ds.y).tolist() == [3000, 3000]

    def test_noiseless_radii(self):
        ds = make_two_circles(100, 0.0, seed=2)
        radii = np.hypot(ds.X[:, 0], ds.X[:, 1])
        np.testing.assert_allclose(radii[ds.y == 0], 1.0, atol=1e-12)
        np.testing.assert_allclose(radii[ds.y == 1], 0.5, atol=1e-12)

    def test_odd_n(self):
        with pytest.raises(ParameterError):
            make_two_circles(9, 0.1, seed=0)

    def test_unknown_generator(self):
        with pytest.raises(ParameterError):
            make_dataset("three_spirals", 10, 0.1, seed=0)


class TestSelectLabeled:
    @pytest.mark.parametrize("name,l", [("two_moons", 12), ("two_circles", 8)])
    def test_balanced_per_class(self, name, l):
        ds = select_labeled(make_dataset(name, 600, 0.1, seed=0), l, seed=0)
        assert ds.n_labeled == l
        assert np.bincount(ds.y[ds.labeled_idx]).tolist() == [l // 2, l // 2]
        assert len(set(ds.labeled_idx.tolist())) == l

    def test_fully_labeled(self):
        ds = select_labeled(make_two_moons(20, 0.1, seed=0), 20, seed=0)
        assert ds.unlabeled_idx.size == 0
        assert ds.labeled_mask.all()

    def test_non_divisible(self):
        with pytest.raises(ParameterError):
            select_labeled(make_two_moons(20, 0.1, seed=0), 5, seed=0)

    def test_label_matrix_is_one_hot(self):
        ds = select_labeled(make_two_moons(20, 0.1, seed=0), 4, seed=1)
        Y = label_matrix(ds).Y
        assert Y.shape == (4, 2)
        np.testing.assert_array_equal(Y.sum(axis=1), 1.0)
        np.testing.assert_array_equal(Y.argmax(axis=1), ds.y[ds.labeled_idx])

    def test_original_dataset_untouched(self):
        base = make_two_moons(20, 0.1, seed=0)
        select_labeled(base, 4, seed=1)
        assert base.n_labeled == 0


class TestAugment:
    def test_zero_noise_is_identity(self):
        x = np.array([[0.3, -1.2]])
        np.testing.assert_array_equal(augment(x, 0.0, np.random.default_rng(0)), x)

    def test_unbiased(self):
        sigma = 0.05
        x = np.array([[0.5, -0.25]])
        draws = augment(np.repeat(x, 100_000, axis=0), sigma, np.random.default_rng(1))
        shift = np.abs(draws.mean(axis=0) - x[0])
        assert np.all(shift < 3 * sigma / np.sqrt(100_000))

    def test_same_rng_state_same_output(self):
        x = np.ones((4, 2))
        a = augment(x, 0.1, np.random.default_rng(9))
        b = augment(x, 0.1, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, x)

    def test_negative_sigma(self):
        with pytest.raises(ParameterError):
            augment(np.ones((1, 2)), -0.1, np.random.default_rng(0))


class TestCsv:
    def test_export_then_import(self, tmp_path):
        ds = select_labeled(make_two_moons(30, 0.1, seed=4), 6, seed=4)
        path = tmp_path / "dataset.csv"
        write_csv(ds, path)
        assert path.read_text().splitlines()[0] == "x0,x1,y,labeled"

        loaded = load_csv(path, name="two_moons", n_classes=2)
        np.testing.assert_array_equal(loaded.X, ds.X)
        np.testing.assert_array_equal(loaded.y, ds.y)
        np.testing.assert_array_equal(loaded.labeled_idx, np.sort(ds.labeled_idx))

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ParameterError):
            load_csv(path)
