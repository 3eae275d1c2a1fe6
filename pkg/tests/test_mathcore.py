import math

import numpy as np
import pytest

from dpcre.mathcore import (
    RngState,
    finite_difference_gradient,
    linear_apply,
    seeded_gaussian,
    softmax_logloss,
)


class TestLinearApply:
    def test_zero_weights_pass_bias(self):
        out = linear_apply(np.zeros((2, 2)), np.array([3.0, -1.0]), np.array([5.0, 5.0]))
        assert np.array_equal(out, [3.0, -1.0])

    def test_identity(self):
        out = linear_apply(np.eye(2), np.zeros(2), np.array([1.5, -2.0]))
        assert np.array_equal(out, [1.5, -2.0])

    def test_hand_product(self):
        W = np.array([[1.0, 2.0], [0.0, 1.0]])
        out = linear_apply(W, np.array([1.0, 0.0]), np.array([1.0, 1.0]))
        assert np.array_equal(out, [4.0, 1.0])

    def test_dim_mismatch_names_dims(self):
        with pytest.raises(ValueError, match="3 columns.*dim 2"):
            linear_apply(np.zeros((2, 3)), np.zeros(2), np.zeros(2))
        with pytest.raises(ValueError, match="bias has dim 3"):
            linear_apply(np.zeros((2, 2)), np.zeros(3), np.zeros(2))

    def test_linearity_property(self):
        rng = RngState(42)
        for i in range(20):
            sub = rng.substream(i)
            W = sub.normal(12).reshape(3, 4)
            b = sub.normal(3)
            x, y = sub.normal(4), sub.normal(4)
            alpha, beta = float(sub.normal(1)[0]), float(sub.normal(1)[0])
            lhs = linear_apply(W, b, alpha * x + beta * y)
            rhs = (
                alpha * linear_apply(W, np.zeros(3), x)
                + beta * linear_apply(W, np.zeros(3), y)
                + b
            )
            assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


class TestSoftmaxLogloss:
    def test_uniform_logits(self):
        assert softmax_logloss(np.zeros(4), 0) == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated_correct_class(self):
        assert softmax_logloss(np.array([100.0, 0.0]), 0) == pytest.approx(0.0, abs=1e-12)

    def test_two_class(self):
        expected = math.log(1 + math.exp(-1))
        assert softmax_logloss(np.array([1.0, 0.0]), 0) == pytest.approx(expected, abs=1e-12)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError, match="out of range"):
            softmax_logloss(np.zeros(3), 3)

    def test_shift_invariance(self):
        rng = RngState(7)
        for i in range(20):
            logits = rng.substream(i).normal(5)
            shift = float(rng.substream("c", i).normal(1)[0]) * 100
            assert softmax_logloss(logits, 2) == pytest.approx(
                softmax_logloss(logits + shift, 2), rel=1e-10
            )

    def test_nonnegative_and_constant_case(self):
        rng = RngState(9)
        for i in range(20):
            logits = rng.substream(i).normal(6)
            assert softmax_logloss(logits, i % 6) >= 0.0
        assert softmax_logloss(np.full(7, 3.3), 4) == pytest.approx(math.log(7), abs=1e-12)

    def test_extreme_logits_stable(self):
        assert np.isfinite(softmax_logloss(np.array([1e4, -1e4, 0.0]), 1))


class TestFiniteDifference:
    def test_linear_exact(self):
        c = np.array([2.0, -3.0, 0.5])
        grad = finite_difference_gradient(lambda x: float(c @ x), np.array([1.0, 2.0, 3.0]), 1e-5)
        assert np.allclose(grad, c, atol=1e-9)

    def test_quadratic(self):
        grad = finite_difference_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
        assert grad[0] == pytest.approx(6.0, abs=1e-9)

    def test_bad_step(self):
        with pytest.raises(ValueError, match="step"):
            finite_difference_gradient(lambda x: 0.0, np.zeros(1), 0.0)

    def test_nonfinite_evaluation(self):
        with pytest.raises(FloatingPointError):
            finite_difference_gradient(lambda x: float("nan"), np.zeros(1), 1e-5)


class TestSeededGaussian:
    def test_determinism(self):
        a = seeded_gaussian(RngState(123), 50)
        b = seeded_gaussian(RngState(123), 50)
        assert np.array_equal(a, b)

    def test_law_of_large_numbers(self):
        draws = seeded_gaussian(RngState(2024), 100_000)
        assert abs(draws.mean()) < 0.02

    def test_seed_sensitivity(self):
        a = seeded_gaussian(RngState(1), 10)
        b = seeded_gaussian(RngState(2), 10)
        assert not np.array_equal(a, b)

    def test_bad_n(self):
        with pytest.raises(ValueError):
            seeded_gaussian(RngState(0), 0)

    def test_advances_state(self):
        rng = RngState(5)
        a = seeded_gaussian(rng, 10)
        b = seeded_gaussian(rng, 10)
        assert not np.array_equal(a, b)


class TestRngState:
    def test_substream_independent_of_draws(self):
        rng = RngState(77)
        sub_before = rng.substream("x").normal(5)
        rng.normal(100)
        sub_after = RngState(77).substream("x").normal(5)
        assert np.array_equal(sub_before, sub_after)

    def test_keyed_index_deterministic_and_in_range(self):
        rng = RngState(31)
        vals = [rng.keyed_index(7, "anchor", i) for i in range(100)]
        assert vals == [RngState(31).keyed_index(7, "anchor", i) for i in range(100)]
        assert all(0 <= v < 7 for v in vals)
        assert len(set(vals)) > 1

    def test_string_and_int_keys(self):
        rng = RngState(4)
        assert rng.substream("a", 1).normal(3).shape == (3,)
        with pytest.raises(TypeError):
            rng.substream(1.5)

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            RngState(-1)
