import math

import numpy as np
import pytest

import tensor as T
from core import NumericError, ShapeError
from tensor import Tensor


def leaf(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def check_gradients(build, arrays, seed=0, coords=12, step=1e-5, floor=1e-4):
    """Compare backward against central differences of sum(W * build(...)) for random fixed W."""
    leaves = [leaf(a) for a in arrays]
    out = build(*leaves)
    weights = np.random.default_rng(seed + 1).normal(size=out.shape)

    def scalar():
        return (build(*leaves) * Tensor(weights)).sum()

    T.backward(scalar())
    rng = np.random.default_rng(seed)
    for t in leaves:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        for j in rng.choice(t.size, size=min(coords, t.size), replace=False):
            original = t.data.flat[j]
            t.data.flat[j] = original + step; plus = scalar().item()
            t.data.flat[j] = original - step; minus = scalar().item()
            t.data.flat[j] = original
            numeric = (plus - minus) / (2 * step)
            assert abs(analytic.flat[j] - numeric) <= 1e-5 * max(abs(analytic.flat[j]), abs(numeric), floor)


class TestForwardValues:
    def test_conv2d_all_ones(self, float64):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_conv2d_identity_kernel(self, float64):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 5))
        w = np.zeros((3, 3, 1, 1)); w[np.arange(3), np.arange(3)] = 1.0
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)

    def test_conv2d_zero_weight_gives_zero_output_and_input_gradient(self, float64):
        x = leaf(np.random.default_rng(0).normal(size=(1, 2, 4, 4)))
        out = T.conv2d(x, leaf(np.zeros((3, 2, 3, 3))), padding=1)
        assert not out.data.any()
        T.backward(out.sum())
        assert not x.grad.any()

    def test_conv2d_rejects_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_batchnorm_train_normalizes(self, float64):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1, 1))
        out = T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), training=True, eps=0.0)
        np.testing.assert_allclose(out.data.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)

    def test_batchnorm_zero_scale_outputs_shift(self, float64):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 2, 2, 2)))
        out = T.batchnorm2d(x, Tensor(np.zeros(2)), Tensor(np.array([0.5, -2.0])), np.zeros(2), np.ones(2), training=True)
        np.testing.assert_array_equal(out.data[:, 0], 0.5)
        np.testing.assert_array_equal(out.data[:, 1], -2.0)

    def test_batchnorm_updates_running_stats_only_in_training(self, float64):
        x = Tensor(np.random.default_rng(2).normal(3.0, 2.0, size=(8, 1, 4, 4)))
        mean, var = np.zeros(1), np.ones(1)
        T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), mean, var, training=True)
        assert mean[0] == pytest.approx(0.1 * x.data.mean())
        frozen = mean.copy()
        T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), mean, var, training=False)
        np.testing.assert_array_equal(mean, frozen)

    def test_relu_and_pooling(self, float64):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        pooled = T.global_avg_pool(Tensor(np.arange(8.0).reshape(1, 2, 2, 2)))
        np.testing.assert_array_equal(pooled.data, [[1.5, 5.5]])

    def test_linear_identity(self, float64):
        x = np.random.default_rng(3).normal(size=(4, 3))
        np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)

    def test_linear_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))

    def test_softmax_examples(self, float64):
        np.testing.assert_allclose(T.softmax_t(Tensor([[0.0, 0.0]]), 1.0).data, [[0.5, 0.5]])
        np.testing.assert_allclose(T.softmax_t(Tensor([[1000.0, 0.0]]), 1.0).data, [[1.0, 0.0]], atol=1e-12)
        np.testing.assert_allclose(T.softmax_t(Tensor([[2.0, 0.0]]), 2.0).data, [[0.7311, 0.2689]], atol=1e-4)

    def test_softmax_rows_sum_to_one(self):
        z = np.random.default_rng(4).normal(scale=30.0, size=(500, 12))
        with T.precision(64):
            s64 = T.softmax_t(Tensor(z), 0.7).data
        s32 = T.softmax_t(Tensor(z), 0.7).data
        np.testing.assert_allclose(s64.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(s32.sum(axis=1), 1.0, atol=1e-5)
        assert (s64 >= 0).all()

    def test_non_positive_temperature(self):
        with pytest.raises(ValueError):
            T.softmax_t(Tensor([[1.0, 2.0]]), 0.0)


class TestLosses:
    def test_cross_entropy_examples(self, float64):
        assert T.cross_entropy_soft(Tensor([[0.0, 0.0]]), [[1.0, 0.0]]).item() == pytest.approx(math.log(2), abs=1e-12)
        assert T.cross_entropy_soft(Tensor([[50.0, 0.0]]), [[1.0, 0.0]]).item() < 1e-9

    def test_cross_entropy_of_own_softmax_is_entropy(self, float64):
        z = np.random.default_rng(5).normal(size=(3, 6))
        p = T.softmax_np(z)
        entropy = -(p * np.log(p)).sum(axis=1).mean()
        assert T.cross_entropy_soft(Tensor(z), p).item() == pytest.approx(entropy, abs=1e-12)

    def test_cross_entropy_rejects_bad_target(self, float64):
        with pytest.raises(ShapeError):
            T.cross_entropy_soft(Tensor([[0.0, 0.0]]), [[0.7, 0.7]])
        with pytest.raises(ShapeError):
            T.cross_entropy_soft(Tensor([[0.0, 0.0]]), [[1.0, 0.0, 0.0]])

    def test_kl_examples(self, float64):
        assert T.kl_div(Tensor([[0.5, 0.5]]), Tensor([[0.5, 0.5]])).item() == pytest.approx(0.0, abs=1e-15)
        assert T.kl_div(Tensor([[1.0, 0.0]]), Tensor([[0.5, 0.5]])).item() == pytest.approx(math.log(2), abs=1e-12)
        assert T.kl_div(Tensor([[0.5, 0.5]]), Tensor([[0.25, 0.75]])).item() == pytest.approx(0.143841, abs=1e-6)

    def test_kl_with_zero_in_q_stays_finite(self, float64):
        value = T.kl_div(Tensor([[0.5, 0.5]]), Tensor([[1.0, 0.0]])).item()
        assert np.isfinite(value) and value > 10

    def test_kl_non_negative(self, float64):
        rng = np.random.default_rng(6)
        for _ in range(50):
            p, q = T.softmax_np(rng.normal(size=(4, 7))), T.softmax_np(rng.normal(size=(4, 7)))
            assert T.kl_div(Tensor(p), Tensor(q)).item() >= -1e-15

    def test_sum_squared_diff_examples(self, float64):
        assert T.sum_squared_diff(Tensor([1.0, 2.0]), Tensor([1.0, 0.0])).item() == 4.0
        a = leaf([3.0, -1.0])
        T.backward(T.sum_squared_diff(a, Tensor([1.0, 1.0])))
        np.testing.assert_array_equal(a.grad, [4.0, -4.0])

    def test_non_finite_values_raise(self):
        with pytest.raises(NumericError):
            T.mul(Tensor([np.inf]), Tensor([0.0]))


class TestGradients:
    def test_conv2d(self, float64):
        rng = np.random.default_rng(0)
        check_gradients(lambda x, w: T.conv2d(x, w, stride=2, padding=1), [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3))])

    def test_conv2d_with_bias(self, float64):
        rng = np.random.default_rng(1)
        check_gradients(lambda x, w, b: T.conv2d(x, w, b, padding=1), [rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)])

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm(self, float64, training):
        rng = np.random.default_rng(2)
        mean, var = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
        check_gradients(lambda x, s, b: T.batchnorm2d(x, s, b, mean.copy(), var.copy(), training),
                        [rng.normal(size=(4, 3, 3, 3)), rng.normal(size=3), rng.normal(size=3)])

    def test_relu_away_from_kink(self, float64):
        rng = np.random.default_rng(3)
        x = np.sign(rng.normal(size=(3, 5))) * (0.5 + np.abs(rng.normal(size=(3, 5))))
        check_gradients(T.relu, [x])

    def test_pool_and_linear(self, float64):
        rng = np.random.default_rng(4)
        check_gradients(lambda x, w, b: T.linear(T.global_avg_pool(x), w, b),
                        [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(3, 5)), rng.normal(size=5)])

    def test_softmax_and_kl(self, float64):
        rng = np.random.default_rng(5)
        check_gradients(lambda a, b: T.kl_div(T.softmax_t(a, 3.0), T.softmax_t(b, 3.0)), [rng.normal(size=(4, 6)), rng.normal(size=(4, 6))])

    def test_cross_entropy(self, float64):
        rng = np.random.default_rng(6)
        target = T.softmax_np(rng.normal(size=(5, 4)))
        check_gradients(lambda z: T.cross_entropy_soft(z, target, 2.0), [rng.normal(size=(5, 4))])

    def test_squared_diff_and_rows(self, float64):
        rng = np.random.default_rng(7)
        check_gradients(lambda a, b: T.sum_squared_diff(a[0:2], b), [rng.normal(size=(5, 3)), rng.normal(size=(2, 3))])

    def test_broadcast_arithmetic(self, float64):
        rng = np.random.default_rng(8)
        check_gradients(lambda a, b: (a * b + b - a * 2.0).reshape(6, 2), [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))])


class TestBackwardPass:
    def test_constant_loss_gives_zero_gradient(self, float64):
        a = leaf([1.0, 2.0])
        T.backward((a * 0.0).sum() + 3.0)
        np.testing.assert_array_equal(a.grad, [0.0, 0.0])

    def test_non_scalar_root(self, float64):
        with pytest.raises(ShapeError):
            T.backward(leaf([1.0, 2.0]) * 2.0)

    def test_item_needs_one_element(self):
        assert Tensor([[2.5]]).item() == 2.5
        with pytest.raises(ShapeError, match="item"):
            Tensor([1.0, 2.0]).item()

    def test_shared_input_accumulates(self, float64):
        a = leaf([1.5])
        T.backward((a * a + a).sum())
        np.testing.assert_allclose(a.grad, [4.0])

    def test_detach_blocks_gradient(self, float64):
        student, target = leaf([[1.0, 0.0, -1.0]]), leaf([[0.3, 0.2, 0.1]])
        loss = T.kl_div(T.softmax_t(student, 2.0), T.softmax_t(T.detach(target), 2.0))
        T.backward(loss)
        assert target.grad is None
        assert np.abs(student.grad).sum() > 0

    def test_no_grad_builds_no_records(self, float64):
        a = leaf([1.0])
        with T.no_grad():
            out = a * 2.0
        assert out.record is None and not out.requires_grad

    def test_repeated_passes_are_bitwise_identical(self):
        rng = np.random.default_rng(9)
        x, w = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
        grads = []
        for _ in range(2):
            xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
            out = T.relu(T.conv2d(xt, wt, padding=1))
            T.backward(T.cross_entropy_soft(out.reshape(2, -1), np.full((2, 144), 1.0 / 144)))
            grads.append((xt.grad.copy(), wt.grad.copy()))
        np.testing.assert_array_equal(grads[0][0], grads[1][0])
        np.testing.assert_array_equal(grads[0][1], grads[1][1])
