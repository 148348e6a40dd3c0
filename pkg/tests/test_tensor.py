"""Autograd substrate: op semantics, gradients, tape behavior."""

import numpy as np
import pytest

from fewdet import tensor as T
from fewdet.gradcheck import check_gradient, max_rel_error, numeric_grad, scalar_readout
from fewdet.nn import Parameter, sgd_step
from fewdet.tensor import Tape, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(9.0).reshape(1, 3, 3))
        w = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, w, b, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_kernel(self):
        # 1x2x2 ones with a 2x2 kernel is rejected (even kernel); use the
        # 3x3 all-ones kernel summing a 3x3 patch instead
        x = Tensor(np.ones((1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, w, b, stride=1, padding=0)
        assert out.shape == (1, 1, 1)
        assert out.item() == 9.0

    def test_output_size_formula(self):
        x = Tensor(np.zeros((2, 11, 11)))
        w = Tensor(np.zeros((3, 2, 3, 3)))
        b = Tensor(np.zeros(3))
        out = T.conv2d(x, w, b, stride=2, padding=1)
        assert out.shape == (3, 6, 6)  # (11 + 2 - 3) // 2 + 1

    def test_strict_mode_rejects_inexact(self):
        x = Tensor(np.zeros((1, 10, 10)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        with pytest.raises(ValueError, match="divide"):
            T.conv2d(x, w, b, stride=2, padding=1, strict=True)

    def test_shape_error_names_dimension(self):
        x = Tensor(np.zeros((2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(ValueError, match="channels"):
            T.conv2d(x, w, Tensor(np.zeros(1)))

    def test_even_kernel_rejected(self):
        x = Tensor(np.zeros((1, 4, 4)))
        w = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError, match="odd"):
            T.conv2d(x, w, Tensor(np.zeros(1)))

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.standard_normal((4, 8, 8))
        w = rng.standard_normal((8, 4, 3, 3))
        b = rng.standard_normal(8)
        probe = rng.standard_normal((8, 8, 8))
        err = check_gradient(
            lambda xt, wt, bt: scalar_readout(T.conv2d(xt, wt, bt, stride=1, padding=1), probe),
            [x, w, b],
        )
        assert err <= 1e-6


class TestLinear:
    def test_identity(self):
        x = Tensor(np.arange(12.0).reshape(3, 4))
        out = T.linear(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_zero_weight_broadcasts_bias(self):
        x = Tensor(np.ones((2, 3)))
        b = np.array([1.0, -2.0])
        out = T.linear(x, Tensor(np.zeros((2, 3))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (2, 1)))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="input dim"):
            T.linear(Tensor(np.ones((2, 5))), Tensor(np.ones((3, 7))), Tensor(np.zeros(3)))

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.standard_normal((5, 7))
        w = rng.standard_normal((3, 7))
        b = rng.standard_normal(3)
        probe = rng.standard_normal((5, 3))
        err = check_gradient(lambda xt, wt, bt: scalar_readout(T.linear(xt, wt, bt), probe), [x, w, b])
        assert err <= 1e-6


class TestSoftmax:
    def test_uniform_for_equal_values(self):
        out = T.softmax(Tensor(np.full(5, 3.7)), axis=0)
        np.testing.assert_allclose(out.data, 0.2, atol=1e-15)

    def test_analytic_two_element(self):
        out = T.softmax(Tensor(np.array([0.0, np.log(3.0)])), axis=0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((4, 6))
        a = T.softmax(Tensor(x), axis=1).data
        b = T.softmax(Tensor(x + 123.456), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    @pytest.mark.parametrize("magnitude", [1.0, 1e2, 1e4])
    def test_rows_sum_to_one_large_magnitude(self, rng, magnitude):
        x = rng.standard_normal((20, 7)) * magnitude
        out = T.softmax(Tensor(x), axis=1).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert (out >= 0).all() and (out <= 1.0).all()
        if magnitude <= 1e2:  # extreme logit gaps underflow smaller entries to +0
            assert (out > 0).all()


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((3, 3))
        out = T.matmul(Tensor(a), Tensor(np.eye(3)))
        np.testing.assert_allclose(out.data, a, atol=1e-15)

    def test_one_by_one(self):
        out = T.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
        assert out.item() == 6.0

    def test_matches_triple_loop(self, rng):
        from fewdet.oracles import matmul_loop

        a = rng.standard_normal((6, 4))
        b = rng.standard_normal((4, 5))
        out = T.matmul(Tensor(a), Tensor(b))
        assert np.abs(out.data - matmul_loop(a, b)).max() <= 1e-12

    def test_inner_dim_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestElementwiseAndReductions:
    def test_global_avg_pool_constant(self):
        out = T.global_avg_pool(Tensor(np.full((5, 3, 4), 2.5)))
        np.testing.assert_allclose(out.data, np.full(5, 2.5))

    def test_relu_values(self):
        out = T.relu(Tensor(np.array([-1.0, 2.0, 0.0])))
        np.testing.assert_array_equal(out.data, [0.0, 2.0, 0.0])

    def test_concat_channels(self):
        a = Tensor(np.zeros((2, 4, 4)))
        b = Tensor(np.ones((3, 4, 4)))
        out = T.concat([a, b], axis=0)
        assert out.shape == (5, 4, 4)

    def test_concat_mismatch(self):
        with pytest.raises(ValueError, match="concat"):
            T.concat([Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 5)))], axis=0)

    def test_add_mul_scale(self, rng):
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal((3, 3))
        np.testing.assert_allclose(T.add(Tensor(a), Tensor(b)).data, a + b)
        np.testing.assert_allclose(T.mul(Tensor(a), Tensor(b)).data, a * b)
        np.testing.assert_allclose(T.scale(Tensor(a), -2.0).data, -2.0 * a)

    def test_sum_axis(self, rng):
        a = rng.standard_normal((3, 5))
        np.testing.assert_allclose(T.tsum(Tensor(a), axis=1).data, a.sum(axis=1))


class TestLosses:
    def test_uniform_logits_give_log_k(self, rng):
        k = 7
        logits = Tensor(np.zeros((4, k)))
        loss = T.cross_entropy(logits, rng.integers(0, k, size=4))
        assert abs(loss.item() - np.log(k)) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label"):
            T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_smooth_l1_zero_at_equality(self, rng):
        x = rng.standard_normal((3, 3))
        assert T.smooth_l1(Tensor(x), Tensor(x.copy())).item() == 0.0

    def test_smooth_l1_linear_branch(self):
        pred = Tensor(np.full(5, 2.0))
        target = Tensor(np.zeros(5))
        # |diff| = 2 in the linear region: per-element loss 2 - 0.5 = 1.5
        assert abs(T.smooth_l1(pred, target).item() - 1.5) < 1e-12

    def test_bce_matches_manual(self, rng):
        z = rng.standard_normal(9)
        t = rng.integers(0, 2, size=9).astype(float)
        expected = np.mean(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0) - z * t)
        assert abs(T.bce_with_logits(Tensor(z), t).item() - expected) < 1e-12


class TestBackward:
    def test_sum_of_squares_gradient(self, rng):
        x = Tensor(rng.standard_normal(6), requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_backward_accumulates_without_zeroing(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        with Tape() as tape:
            loss = T.tsum(T.mul(x, x))
        tape.backward(loss)
        once = x.grad.copy()
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * once, atol=1e-15)

    def test_backward_rejects_non_scalar(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(y)

    def test_backward_is_linear(self, rng):
        x0 = rng.standard_normal(5)
        a, b = 1.7, -0.6

        def grad_of(fn):
            x = Tensor(x0.copy(), requires_grad=True)
            with Tape() as tape:
                loss = fn(x)
            tape.backward(loss)
            return x.grad

        g1 = grad_of(lambda x: T.tsum(T.mul(x, x)))
        g2 = grad_of(lambda x: T.tsum(T.relu(x)))
        gc = grad_of(lambda x: T.add(T.scale(T.tsum(T.mul(x, x)), a), T.scale(T.tsum(T.relu(x)), b)))
        np.testing.assert_allclose(gc, a * g1 + b * g2, atol=1e-10)

    def test_repeat_run_bit_identical(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
            w = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
            with Tape() as tape:
                out = T.linear(x, w, Tensor(np.zeros(3)))
                loss = T.tsum(T.mul(out, out))
            tape.backward(loss)
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        assert (gx1 == gx2).all() and (gw1 == gw2).all()

    def test_all_values_finite_after_pass(self, rng):
        x = Tensor(rng.standard_normal((3, 8)) * 1e3, requires_grad=True)
        with Tape() as tape:
            out = T.softmax(x, axis=1)
            loss = T.cross_entropy(out, np.zeros(3, dtype=int))
        tape.backward(loss)
        assert np.isfinite(out.data).all() and np.isfinite(x.grad).all()

    def test_tape_records_are_topological(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with Tape() as tape:
            y = T.mul(x, x)
            z = T.add(y, x)
            loss = T.tsum(z)
        outs = [rec[0] for rec in tape._records]
        assert outs.index(y) < outs.index(z) < outs.index(loss)


class TestSgd:
    def test_plain_step(self):
        p = Parameter("w", np.array([1.0, 2.0]))
        p.tensor.grad = np.array([0.5, -1.0])
        sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
        np.testing.assert_allclose(p.data, [0.95, 2.1])
        assert p.tensor.grad is None

    def test_momentum_accumulates(self):
        p = Parameter("w", np.zeros(1))
        for _ in range(2):
            p.tensor.grad = np.ones(1)
            sgd_step([p], lr=1.0, momentum=0.5, weight_decay=0.0)
        # step 1: buf=1, w=-1; step 2: buf=1.5, w=-2.5
        np.testing.assert_allclose(p.data, [-2.5])

    def test_weight_decay(self):
        p = Parameter("w", np.array([10.0]))
        p.tensor.grad = np.zeros(1)
        sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.01)
        np.testing.assert_allclose(p.data, [10.0 - 0.1 * 0.1])


def test_finite_difference_utility_self_check(rng):
    x = rng.standard_normal(5)
    num = numeric_grad(lambda v: float((v**2).sum()), x.copy())
    assert max_rel_error(2 * x, num) < 1e-9
