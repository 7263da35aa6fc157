import numpy as np
import pytest

from unist import tensor as T
from unist.errors import NumericalError, ShapeError
from unist.tensor import Tensor, backward

from helpers import assert_close_to_fd, central_difference


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, [[0.0, 1.0], [0.0, 0.0]])

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
        backward(T.reduce_sum(T.matmul(a, b)))
        fd_a, fd_b = central_difference(
            lambda: float(np.matmul(a.data, b.data).sum()), [a.data, b.data]
        )
        assert_close_to_fd(a.grad, fd_a, rel=1e-6)
        assert_close_to_fd(b.grad, fd_b, rel=1e-6)

    def test_batched_matmul_gradient(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.uniform(-1, 1, (2, 3, 4)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (4, 5)), requires_grad=True)
        backward(T.reduce_sum(T.matmul(a, w)))
        fd_a, fd_w = central_difference(
            lambda: float(np.matmul(a.data, w.data).sum()), [a.data, w.data]
        )
        assert_close_to_fd(a.grad, fd_a)
        assert_close_to_fd(w.grad, fd_w)


class TestElementwise:
    def test_sigmoid_of_zero(self):
        assert T.sigmoid(Tensor(0.0)).item() == 0.5

    def test_relu_definition(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_gradient_zero_at_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        backward(T.reduce_sum(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_hadamard(self):
        out = T.hadamard(Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0]))
        np.testing.assert_array_equal(out.data, [4.0, 10.0, 18.0])

    def test_sigmoid_output_range(self):
        x = Tensor(np.linspace(-50, 50, 101))
        out = T.sigmoid(x).data
        assert (out > 0).all() and (out < 1).all()

    def test_incompatible_broadcast_rejected(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 3))))

    def test_leading_axis_broadcast(self):
        big = Tensor(np.ones((4, 2, 3)), requires_grad=True)
        small = Tensor(np.ones((2, 3)), requires_grad=True)
        backward(T.reduce_sum(T.add(big, small)))
        np.testing.assert_array_equal(small.grad, np.full((2, 3), 4.0))
        np.testing.assert_array_equal(big.grad, np.ones((4, 2, 3)))

    def test_abs_and_smooth_l1_gradients(self):
        x = Tensor([-2.0, -0.5, 0.5, 2.0], requires_grad=True)
        backward(T.reduce_sum(T.absolute(x)))
        np.testing.assert_array_equal(x.grad, [-1.0, -1.0, 1.0, 1.0])

        y = Tensor([-2.0, -0.5, 0.5, 2.0], requires_grad=True)
        out = T.smooth_l1(y)
        np.testing.assert_allclose(out.data, [1.5, 0.125, 0.125, 1.5])
        backward(T.reduce_sum(out))
        np.testing.assert_array_equal(y.grad, [-1.0, -0.5, 0.5, 1.0])


class TestSoftmax:
    def test_constant_logits_uniform(self):
        for c in (-3.0, 0.0, 11.5):
            out = T.softmax(Tensor([c, c, c])).data
            np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-15)

    def test_hand_values(self):
        out = T.softmax(Tensor([0.0, np.log(3.0)])).data
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)

    def test_large_logits_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_sums_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            logits = rng.uniform(-5, 5, 6)
            s1 = T.softmax(Tensor(logits)).data
            s2 = T.softmax(Tensor(logits + 17.3)).data
            assert abs(s1.sum() - 1.0) < 1e-12
            np.testing.assert_allclose(s1, s2, atol=1e-12)

    def test_nan_rejected(self):
        with pytest.raises(NumericalError):
            T.softmax(Tensor([0.0, np.nan]))

    def test_gradient(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.uniform(-1, 1, 5), requires_grad=True)
        w = rng.uniform(-1, 1, 5)
        backward(T.reduce_sum(T.mul(T.softmax(x), Tensor(w))))

        def f():
            z = x.data - x.data.max()
            e = np.exp(z)
            return float((e / e.sum() * w).sum())

        (fd,) = central_difference(f, [x.data])
        assert_close_to_fd(x.grad, fd)


class TestReduce:
    def test_mean_of_constant(self):
        assert T.reduce_mean(Tensor(np.full((3, 4), 2.5))).item() == 2.5

    def test_sum_axis0(self):
        out = T.reduce_sum(Tensor([[1.0, 2.0], [3.0, 4.0]]), axes=0)
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mean_gradient_is_reciprocal_count(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(T.reduce_mean(x))
        np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))

    def test_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            T.reduce_sum(Tensor(np.zeros((2, 2))), axes=2)

    def test_partial_reduction_gradient(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
        backward(T.reduce_sum(T.reduce_mean(x, axes=(0, 2))))
        np.testing.assert_allclose(x.grad, np.full((2, 3, 4), 1 / 8))


class TestDataMovement:
    def test_stack_leading_axis(self):
        a, b = Tensor(np.zeros((3, 5))), Tensor(np.ones((3, 5)))
        assert T.stack([a, b]).shape == (2, 3, 5)

    def test_stack_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.stack([Tensor(np.zeros((2,))), Tensor(np.zeros((3,)))])

    def test_transpose_involution(self):
        x = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(T.transpose(T.transpose(Tensor(x))).data, x)

    def test_concat_shapes(self):
        out = T.concat([Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 3)))], axis=1)
        assert out.shape == (4, 5)

    def test_concat_gradient_splits(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 3)), requires_grad=True)
        out = T.concat([a, b], axis=1)
        backward(T.reduce_sum(T.mul(out, Tensor(np.arange(10.0).reshape(2, 5)))))
        np.testing.assert_array_equal(a.grad, [[0.0, 1.0], [5.0, 6.0]])
        np.testing.assert_array_equal(b.grad, [[2.0, 3.0, 4.0], [7.0, 8.0, 9.0]])

    def test_stack_gradient(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        out = T.stack([a, b], axis=0)
        backward(T.reduce_sum(T.mul(out, Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))))
        np.testing.assert_array_equal(a.grad, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(b.grad, [4.0, 5.0, 6.0])

    def test_reshape_size_check(self):
        with pytest.raises(ShapeError):
            T.reshape(Tensor(np.zeros(6)), (4, 2))


class TestNormalizeRows:
    def test_zero_row_stays_zero(self):
        out = T.normalize_rows(Tensor([[2.0, 2.0], [0.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [[0.5, 0.5], [0.0, 0.0]])

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.uniform(0.1, 1, (4, 4)), requires_grad=True)
        w = rng.uniform(-1, 1, (4, 4))
        backward(T.reduce_sum(T.mul(T.normalize_rows(x), Tensor(w))))

        def f():
            rs = x.data.sum(axis=1, keepdims=True)
            return float((x.data / rs * w).sum())

        (fd,) = central_difference(f, [x.data])
        assert_close_to_fd(x.grad, fd)


class TestDropout:
    def test_p_zero_is_identity(self):
        x = Tensor(np.arange(5.0))
        rng = np.random.default_rng(0)
        np.testing.assert_array_equal(T.dropout(x, 0.0, True, rng).data, x.data)
        np.testing.assert_array_equal(T.dropout(x, 0.0, False).data, x.data)

    def test_eval_mode_is_identity(self):
        x = Tensor(np.arange(5.0))
        np.testing.assert_array_equal(T.dropout(x, 0.2, False).data, x.data)

    def test_fixed_seed_deterministic_mask(self):
        x = Tensor(np.ones(1000))
        a = T.dropout(x, 0.3, True, np.random.default_rng(42)).data
        b = T.dropout(x, 0.3, True, np.random.default_rng(42)).data
        np.testing.assert_array_equal(a, b)
        survivors = a[a != 0]
        np.testing.assert_allclose(survivors, 1.0 / 0.7)

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 1.0, True, np.random.default_rng(0))


class TestBackward:
    def test_sum_gradient_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_hadamard_square_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(T.reduce_sum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            backward(T.mul(x, x))

    def test_untouched_leaf_reads_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_grad_accumulates_over_paths(self):
        x = Tensor([3.0], requires_grad=True)
        y = T.add(T.mul(x, 2.0), T.mul(x, 5.0))
        backward(T.reduce_sum(y))
        np.testing.assert_array_equal(x.grad, [7.0])

    def test_composite_gradient_matches_fd(self):
        rng = np.random.default_rng(11)
        w1 = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
        w2 = Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)
        x = rng.uniform(-1, 1, (5, 4))

        def forward():
            h = np.maximum(np.matmul(x, w1.data), 0.0)
            s = 1.0 / (1.0 + np.exp(-np.matmul(h, w2.data)))
            return float(s.mean())

        out = T.reduce_mean(T.sigmoid(T.matmul(T.relu(T.matmul(Tensor(x), w1)), w2)))
        backward(out)
        fd1, fd2 = central_difference(forward, [w1.data, w2.data])
        assert_close_to_fd(w1.grad, fd1)
        assert_close_to_fd(w2.grad, fd2)

    def test_bitwise_determinism(self):
        rng = np.random.default_rng(13)
        data = rng.uniform(-1, 1, (6, 6))
        results = []
        for _ in range(2):
            x = Tensor(data.copy(), requires_grad=True)
            y = T.reduce_sum(T.mul(T.sigmoid(T.matmul(x, x)), T.relu(x)))
            backward(y)
            results.append((y.item(), x.grad.copy()))
        assert results[0][0] == results[1][0]
        np.testing.assert_array_equal(results[0][1], results[1][1])
