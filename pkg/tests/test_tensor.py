"""Tests for the autodiff engine: op semantics, backward rules vs central
finite differences, and the grad-check harness itself."""

import numpy as np
import pytest

from dialoflow import tensor as T
from dialoflow.tensor import GradCheckError, IndexLookupError, ShapeMismatchError, Tensor


def t64(data, requires_grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(t64(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_projector(self):
        p = t64([[1.0, 0.0], [0.0, 0.0]])
        b = t64([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(p, b).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        a = t64(rng.normal(size=(3, 4)))
        b = t64(rng.normal(size=(4, 2)))
        report = T.grad_check(lambda: T.tsum(T.matmul(a, b)), [a, b], step=1e-5)
        assert report["max_rel_error"] < 1e-4


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(t64([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_reference_values(self):
        out = T.softmax(t64([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.data, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_max_subtraction_saturates_without_nan(self):
        out = T.softmax(t64([1000.0, 0.0]))
        assert not np.any(np.isnan(out.data))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-30)

    def test_rows_sum_to_one(self):
        for seed in range(100):
            x = np.random.default_rng(seed).normal(scale=10, size=(4, 7))
            out = T.softmax(t64(x), axis=-1)
            np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(out.data >= 0)


class TestLayerNorm:
    def test_two_point_vector(self):
        out = T.layer_norm(t64([[1.0, 3.0]]), t64([1.0, 1.0]), t64([0.0, 0.0]), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_constant_vector_is_zero_pre_affine(self):
        out = T.layer_norm(t64([[4.0, 4.0, 4.0]]), t64(np.ones(3)), t64(np.zeros(3)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        x = t64(rng.normal(size=(1, 5)))
        g = t64(rng.normal(size=5))
        b = t64(rng.normal(size=5))
        report = T.grad_check(lambda: T.tsum(T.layer_norm(x, g, b)), [x, g, b], step=1e-5)
        assert report["max_rel_error"] < 1e-4

    def test_bad_gain_shape(self):
        with pytest.raises(ShapeMismatchError):
            T.layer_norm(t64(np.zeros((2, 4))), t64(np.zeros(3)), t64(np.zeros(4)))


class TestElementwise:
    def test_gelu_center(self):
        assert T.gelu(t64([0.0])).data[0] == 0.0

    def test_gelu_at_one(self):
        np.testing.assert_allclose(T.gelu(t64([1.0])).data[0], 0.84119, atol=1e-4)

    def test_concat(self):
        out = T.concat([t64([1.0, 2.0]), t64([3.0])], axis=0)
        np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexLookupError):
            T.embedding_lookup([0, 5], t64(np.zeros((3, 2))))

    def test_add_bias_broadcast_only_trailing(self):
        with pytest.raises(ShapeMismatchError):
            T.add(t64(np.zeros((2, 3))), t64(np.zeros((2, 1))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = t64(np.random.default_rng(2).normal(size=(3, 4)))
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_product_rule(self):
        x = t64(3.0)
        y = t64(5.0)
        T.backward(T.mul(x, y))
        assert x.grad == 5.0 and y.grad == 3.0

    def test_reused_parameter_accumulates(self):
        x = t64([2.0, -1.0])
        T.backward(T.tsum(T.mul(x, x)))  # d/dx sum(x^2) = 2x
        np.testing.assert_allclose(x.grad, [4.0, -2.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            T.backward(t64([1.0, 2.0]))

    def test_unreachable_param_keeps_zero_grad(self):
        x = t64([1.0])
        y = t64([2.0])
        y.zero_grad()
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(y.grad, [0.0])


class TestGradCheck:
    def test_square_at_three(self):
        x = t64(3.0)
        report = T.grad_check(lambda: T.mul(x, x), [x], step=1e-5)
        assert report["max_rel_error"] < 1e-6

    def test_kink_reports_large_error_without_crash(self):
        # |x| with a one-sided subgradient at 0: analytic 1, numeric 0
        x = t64(0.0)

        def absval():
            sign = 1.0 if float(x.data) >= 0 else -1.0
            return T.scale(x, sign)

        report = T.grad_check(absval, [x], step=1e-5)
        assert report["max_rel_error"] > 0.5

    def test_two_layer_mlp(self):
        rng = np.random.default_rng(3)
        w1 = t64(rng.normal(scale=0.5, size=(4, 6)))
        b1 = t64(rng.normal(size=6))
        w2 = t64(rng.normal(scale=0.5, size=(6, 2)))
        b2 = t64(rng.normal(size=2))
        x = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
        weights = Tensor(rng.normal(size=(3, 2)), dtype=np.float64)

        def f():
            h = T.gelu(T.add(T.matmul(x, w1), b1))
            return T.tsum(T.mul(T.softmax(T.add(T.matmul(h, w2), b2)), weights))

        report = T.grad_check(f, [w1, b1, w2, b2], step=1e-5)
        assert report["max_rel_error"] < 1e-4

    def test_nondeterministic_f_aborted(self):
        x = t64(1.0)
        state = {"n": 0}

        def f():
            state["n"] += 1
            return T.scale(x, float(state["n"]))

        with pytest.raises(GradCheckError):
            T.grad_check(f, [x])


def _op_cases(rng):
    """Small random instances of every registered op, as (f, params)."""
    a = t64(rng.normal(size=(3, 4)))
    b = t64(rng.normal(size=(4, 2)))
    c = t64(rng.normal(size=(3, 4)))
    bias = t64(rng.normal(size=4))
    batch_a = t64(rng.normal(size=(2, 3, 2)))
    batch_b = t64(rng.normal(size=(2, 2, 3)))
    g = t64(rng.normal(size=4))
    bb = t64(rng.normal(size=4))
    table = t64(rng.normal(size=(5, 3)))
    return [
        (lambda: T.tsum(T.add(a, c)), [a, c]),
        (lambda: T.tsum(T.add(a, bias)), [a, bias]),
        (lambda: T.tsum(T.mul(a, c)), [a, c]),
        (lambda: T.tsum(T.sub(a, c)), [a, c]),
        (lambda: T.tsum(T.matmul(a, b)), [a, b]),
        (lambda: T.tsum(T.matmul(batch_a, batch_b)), [batch_a, batch_b]),
        (lambda: T.tsum(T.mul(T.softmax(a), c)), [a]),
        (lambda: T.tsum(T.mul(T.log_softmax(a), c)), [a]),
        (lambda: T.tsum(T.gelu(a)), [a]),
        (lambda: T.tsum(T.mul(T.layer_norm(a, g, bb), c)), [a, g, bb]),
        (lambda: T.tsum(T.concat([a, c], axis=-1)), [a, c]),
        (lambda: T.tsum(T.take_rows(table, [0, 2, 2, 4])), [table]),
        (lambda: T.tsum(T.gather_last(a, [1, 0, 3])), [a]),
        (lambda: T.tsum(T.mul(T.transpose(a, (1, 0)), T.transpose(c, (1, 0)))), [a]),
        (lambda: T.tsum(T.mul(T.reshape(a, (2, 6)), T.reshape(c, (2, 6)))), [a]),
        (lambda: T.tmean(T.slice_rows(a, 1, 3)), [a]),
        (lambda: T.scale(T.tsum(a), -2.5), [a]),
    ]


def test_every_op_gradient_over_100_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for f, params in _op_cases(rng):
            report = T.grad_check(f, params, step=1e-5)
            assert report["max_rel_error"] < 1e-4, f"seed {seed}: {report['per_param']}"


def test_determinism_bit_identical():
    def compute(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(4, 4)), dtype=np.float32)
        return T.softmax(T.gelu(T.matmul(x, x))).data

    assert np.array_equal(compute(7), compute(7))
