import numpy as np
import pytest

from lib import autodiff as ad
from lib.autodiff import (
    ContractError,
    DimensionError,
    DomainError,
    NonFiniteError,
    ParameterError,
    Tape,
    backward,
    central_difference,
)


def _leaf(tape, value, name="x"):
    return tape.leaf(np.array(value, dtype=np.float64), requires_grad=True, name=name)


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 4.0]])
        out = ad.matmul(np.eye(2), m)
        np.testing.assert_array_equal(out.value, m)

    def test_hand_arithmetic(self):
        out = ad.matmul([[1.0, 2.0], [3.0, 4.0]], np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.value, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((3, 4))
        B = rng.standard_normal((4, 2))

        tape = Tape()
        a = _leaf(tape, A, "A")
        grads = backward(ad.sum_all(ad.matmul(a, tape.constant(B))))

        numeric = central_difference(lambda: float((A @ B).sum()), A)
        np.testing.assert_allclose(grads["A"], numeric, rtol=1e-6)


class TestElementwise:
    def test_leaky_relu_negative(self):
        out = ad.elementwise("leaky_relu", np.array([[-1.0, 2.0]]), slope=0.1)
        np.testing.assert_allclose(out.value, [[-0.1, 2.0]])

    def test_exp_at_zero(self):
        tape = Tape()
        x = _leaf(tape, [[0.0]])
        out = ad.exp(x)
        grads = backward(out)
        assert out.item() == 1.0
        assert grads["x"][0, 0] == 1.0

    def test_ln_gradient(self):
        tape = Tape()
        x = _leaf(tape, [[2.0]])
        grads = backward(ad.ln(x))
        point = np.array([[2.0]])
        numeric = central_difference(lambda: float(np.log(point).sum()), point)
        assert grads["x"][0, 0] == pytest.approx(0.5)
        assert abs(grads["x"][0, 0] - numeric[0, 0]) < 1e-8

    def test_ln_domain(self):
        with pytest.raises(DomainError):
            ad.ln(np.array([[1.0, 0.0]]))

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.elementwise("add", np.ones((2, 2)), np.ones((2, 3)))

    def test_unknown_op(self):
        with pytest.raises(ParameterError):
            ad.elementwise("tanh", np.ones((1, 1)))

    @pytest.mark.parametrize("op", ["leaky_relu", "exp", "square"])
    def test_unary_gradients(self, op):
        rng = np.random.default_rng(1)
        for _ in range(20):
            X = rng.standard_normal((3, 3))
            tape = Tape()
            x = _leaf(tape, X)
            grads = backward(ad.sum_all(ad.elementwise(op, x)))
            reference = {
                "leaky_relu": lambda v: np.where(v > 0, v, 0.1 * v),
                "exp": np.exp,
                "square": np.square,
            }[op]
            numeric = central_difference(lambda: float(reference(X).sum()), X)
            np.testing.assert_allclose(grads["x"], numeric, rtol=1e-4, atol=1e-8)

    def test_mul_gradient(self):
        rng = np.random.default_rng(2)
        A, B = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        tape = Tape()
        a, b = _leaf(tape, A, "a"), _leaf(tape, B, "b")
        grads = backward(ad.sum_all(ad.mul(a, b)))
        np.testing.assert_allclose(grads["a"], B)
        np.testing.assert_allclose(grads["b"], A)


class TestSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(ad.softmax_rows(np.zeros((1, 2))).value, [[0.5, 0.5]])

    def test_large_logits_do_not_overflow(self):
        out = ad.softmax_rows(np.array([[1000.0, 0.0]])).value
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] < 1e-300 or out[0, 1] == 0.0

    def test_rows_sum_to_one(self):
        X = np.random.default_rng(3).standard_normal((5, 4)) * 10
        out = ad.softmax_rows(X).value
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_vector_jacobian_product(self):
        rng = np.random.default_rng(4)
        X = rng.standard_normal((2, 3))
        weights = rng.standard_normal((2, 3))
        tape = Tape()
        x = _leaf(tape, X)
        grads = backward(ad.sum_all(ad.mul(ad.softmax_rows(x), tape.constant(weights))))

        def loss():
            e = np.exp(X - X.max(axis=1, keepdims=True))
            return float((e / e.sum(axis=1, keepdims=True) * weights).sum())

        np.testing.assert_allclose(grads["x"], central_difference(loss, X), rtol=1e-6, atol=1e-10)

    def test_log_softmax_matches_log_of_softmax(self):
        X = np.random.default_rng(6).standard_normal((4, 3)) * 5
        np.testing.assert_allclose(ad.log_softmax_rows(X).value, np.log(ad.softmax_rows(X).value), atol=1e-12)

    def test_log_softmax_keeps_gradient_when_saturated(self):
        X = np.array([[60.0, -60.0]])
        tape = Tape()
        x = _leaf(tape, X)
        # picking the losing class: log-prob is about -120, slope -1 / +1
        grads = backward(ad.sum_all(ad.mul(ad.log_softmax_rows(x), tape.constant(np.array([[0.0, 1.0]])))))
        np.testing.assert_allclose(grads["x"], [[-1.0, 1.0]], atol=1e-12)

    def test_log_softmax_vector_jacobian_product(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((3, 4))
        weights = rng.standard_normal((3, 4))
        tape = Tape()
        x = _leaf(tape, X)
        grads = backward(ad.sum_all(ad.mul(ad.log_softmax_rows(x), tape.constant(weights))))

        def loss():
            shifted = X - X.max(axis=1, keepdims=True)
            return float(((shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))) * weights).sum())

        np.testing.assert_allclose(grads["x"], central_difference(loss, X), rtol=1e-6, atol=1e-10)


class TestBackward:
    def test_sum_gives_ones(self):
        tape = Tape()
        x = _leaf(tape, np.arange(6.0).reshape(2, 3))
        grads = backward(ad.sum_all(x))
        np.testing.assert_array_equal(grads["x"], np.ones((2, 3)))

    def test_sum_of_squares(self):
        tape = Tape()
        x = _leaf(tape, [[1.0, 2.0, 3.0]])
        grads = backward(ad.sum_all(ad.mul(x, x)))
        np.testing.assert_array_equal(grads["x"], [[2.0, 4.0, 6.0]])

    def test_repeated_calls_accumulate_until_zeroed(self):
        tape = Tape()
        x = _leaf(tape, [[1.0, 2.0]])
        loss = ad.sum_all(ad.square(x))
        backward(loss)
        grads = backward(loss)
        np.testing.assert_array_equal(grads["x"], [[4.0, 8.0]])
        tape.zero_grad()
        np.testing.assert_array_equal(backward(loss)["x"], [[2.0, 4.0]])

    def test_non_scalar_loss(self):
        tape = Tape()
        x = _leaf(tape, [[1.0, 2.0]])
        with pytest.raises(ContractError):
            backward(x)

    def test_shared_leaf_gradients_add_up(self):
        tape = Tape()
        x = _leaf(tape, [[3.0]])
        grads = backward(ad.add(ad.square(x), ad.affine(x, scale=2.0)))
        assert grads["x"][0, 0] == pytest.approx(8.0)

    def test_deterministic_replay(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((4, 3))

        def run():
            tape = Tape()
            x = _leaf(tape, X.copy())
            w = tape.constant(rng_w)
            return backward(ad.mean_all(ad.softmax_rows(ad.matmul(x, w))))["x"]

        rng_w = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(run(), run())

    def test_take_rows_scatters_repeated_indices(self):
        tape = Tape()
        x = _leaf(tape, np.ones((3, 2)))
        grads = backward(ad.sum_all(ad.take_rows(x, [0, 0, 2])))
        np.testing.assert_array_equal(grads["x"], [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_take_rows_distinct_indices_route_each_row(self):
        tape = Tape()
        x = _leaf(tape, np.zeros((4, 2)))
        weights = np.array([[1.0, 2.0], [3.0, 4.0]])
        grads = backward(ad.sum_all(ad.mul(ad.take_rows(x, [3, 1]), tape.constant(weights))))
        np.testing.assert_array_equal(grads["x"], [[0.0, 0.0], [3.0, 4.0], [0.0, 0.0], [1.0, 2.0]])

    def test_leaf_reused_twice_accumulates(self):
        tape = Tape()
        x = _leaf(tape, np.full((1, 2), 3.0))
        grads = backward(ad.sum_all(ad.mul(x, x)))
        np.testing.assert_array_equal(grads["x"], [[6.0, 6.0]])

    def test_concat_and_column_route_gradients(self):
        tape = Tape()
        a = _leaf(tape, np.ones((2, 2)), "a")
        b = _leaf(tape, np.ones((1, 2)), "b")
        stacked = ad.concat_rows([a, b])
        grads = backward(ad.sum_all(ad.column(stacked, 1)))
        np.testing.assert_array_equal(grads["a"], [[0.0, 1.0], [0.0, 1.0]])
        np.testing.assert_array_equal(grads["b"], [[0.0, 1.0]])

    def test_constants_receive_no_gradient(self):
        tape = Tape()
        x = _leaf(tape, [[1.0]])
        c = tape.constant([[2.0]], name="c")
        grads = backward(ad.mul(x, c))
        assert "c" not in grads

    def test_non_finite_result_is_reported(self):
        with pytest.raises(NonFiniteError) as info:
            ad.exp(np.array([[1000.0]]))
        assert info.value.op == "exp"

    def test_mixing_tapes(self):
        with pytest.raises(ContractError):
            ad.add(Tape().constant([[1.0]]), Tape().constant([[1.0]]))


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = Tape().constant(np.ones((3, 3)))
        rng = np.random.default_rng(0)
        assert ad.dropout(x, 0.0, rng, training=True) is x
        assert ad.dropout(x, 0.0, None, training=False) is x

    def test_eval_mode_is_identity(self):
        x = Tape().constant(np.ones((3, 3)))
        assert ad.dropout(x, 0.2, None, training=False) is x

    def test_zero_fraction(self):
        rng = np.random.default_rng(7)
        out = ad.dropout(np.ones((1, 100_000)), 0.2, rng, training=True).value
        zero_fraction = np.mean(out == 0.0)
        assert 0.19 <= zero_fraction <= 0.21
        np.testing.assert_allclose(out[out != 0.0], 1.25)

    def test_invalid_rate(self):
        with pytest.raises(ParameterError):
            ad.dropout(np.ones((1, 1)), 1.0, np.random.default_rng(0), training=True)

    def test_training_needs_rng(self):
        with pytest.raises(ContractError):
            ad.dropout(np.ones((1, 1)), 0.5, None, training=True)


class TestBind:
    def test_bind_reuses_leaves_and_names_them(self):
        tape = Tape()
        params = {"0.W": np.ones((2, 2))}
        first = tape.bind("theta", params)
        second = tape.bind("theta", params)
        assert first["0.W"] is second["0.W"]
        assert first["0.W"].name == "theta/0.W"
        assert first["0.W"].value is params["0.W"]

    def test_frozen_bind_has_no_gradient(self):
        tape = Tape()
        frozen = tape.bind("alpha_ema", {"0.W": np.ones((1, 1))}, trainable=False)
        x = _leaf(tape, [[2.0]])
        grads = backward(ad.mul(x, frozen["0.W"]))
        assert "alpha_ema/0.W" not in grads
        assert grads["x"][0, 0] == 1.0
