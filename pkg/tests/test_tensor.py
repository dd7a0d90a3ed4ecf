import numpy as np
import pytest

from src.tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    avg_pool2,
    check_gradients,
    concat_channels,
    conv2d,
    elementwise,
    narrow_channels,
    nearest_upsample2,
    no_grad,
    set_debug_mode,
    unbroadcast,
)

GRAD_TOL = 1e-4


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


class TestElementwise:
    def test_add(self):
        """Adding two vectors works elementwise."""
        out = elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_sigmoid_at_zero(self):
        assert elementwise("sigmoid", Tensor([0.0])).item() == 0.5

    def test_leaky_relu_negative_input(self):
        """LeakyReLU scales negative inputs by alpha."""
        out = elementwise("leaky_relu", Tensor([-1.0, 2.0]), alpha=0.2)
        np.testing.assert_allclose(out.data, [-0.2, 2.0])

    def test_trailing_one_broadcast(self):
        a = Tensor(np.ones((2, 3)))
        b = Tensor(np.array([[1.0], [2.0]]))
        np.testing.assert_array_equal((a * b).data, [[1, 1, 1], [2, 2, 2]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_log_of_non_positive(self):
        with pytest.raises(ValueError, match="non-positive"):
            Tensor([1.0, 0.0]).log()

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            elementwise("tanh", Tensor([0.0]))

    def test_binary_op_needs_two_operands(self):
        with pytest.raises(ValueError):
            elementwise("mul", Tensor([1.0]))

    def test_unbroadcast_sums_expanded_axes(self):
        grad = np.ones((4, 2, 3))
        np.testing.assert_array_equal(unbroadcast(grad, (2, 1)), np.full((2, 1), 12.0))

    def test_non_finite_result_raises_in_debug_mode(self):
        """Overflowing exp is reported instead of propagated."""
        with pytest.raises(NonFiniteError):
            Tensor([1000.0]).exp()

    def test_non_finite_check_can_be_disabled(self):
        set_debug_mode(False)
        out = Tensor([1000.0]).exp()
        assert np.isinf(out.data[0])


class TestConvolution:
    def test_sum_of_ones(self):
        """A 3x3 ones kernel over a 3x3 ones input gives 9."""
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, [[[[9.0]]]])

    def test_identity_corner_kernel(self):
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        w = Tensor(np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))
        np.testing.assert_array_equal(conv2d(x, w).data, [[[[1.0]]]])

    def test_padding_keeps_size(self):
        out = conv2d(Tensor(np.ones((2, 3, 5, 5))), Tensor(np.ones((4, 3, 3, 3))), pad=1)
        assert out.shape == (2, 4, 5, 5)
        # Corner sees a 2x2 patch of ones in each of 3 channels
        assert out.data[0, 0, 0, 0] == 12.0

    def test_stride_two(self):
        out = conv2d(Tensor(np.ones((1, 1, 6, 6))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        assert out.shape == (1, 1, 3, 3)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="Channel"):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_non_positive_output(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))

    def test_gradient_of_sum_wrt_input(self, rng):
        """Input gradient matches central differences on a 1x2x6x6 input."""
        x = leaf(rng, 1, 2, 6, 6)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        error = check_gradients(lambda: conv2d(x, w, pad=1).sum(), [x])
        assert error < 1e-5


class TestPoolingAndUpsampling:
    def test_avg_pool_mean_of_four(self):
        out = avg_pool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
        np.testing.assert_array_equal(out.data, [[[[2.5]]]])

    def test_avg_pool_constant(self):
        out = avg_pool2(Tensor(np.full((1, 2, 4, 4), 3.0)))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 3.0))

    def test_avg_pool_odd_extent(self):
        with pytest.raises(ShapeError):
            avg_pool2(Tensor(np.ones((1, 1, 3, 4))))

    def test_avg_pool_gradient_is_quarter(self):
        x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
        avg_pool2(x).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 4, 4), 0.25))

    def test_upsample_single_pixel(self):
        np.testing.assert_array_equal(nearest_upsample2(Tensor([[[[1.0]]]])).data, np.ones((1, 1, 2, 2)))

    def test_upsample_blocks(self):
        out = nearest_upsample2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data[0, 0]
        expected = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]], dtype=float)
        np.testing.assert_array_equal(out, expected)

    def test_upsample_gradient_is_four(self):
        x = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
        nearest_upsample2(x).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((1, 2, 3, 3), 4.0))

    def test_pool_after_upsample_is_identity(self, rng):
        x = rng.integers(-50, 50, size=(2, 3, 4, 4)).astype(float) / 8.0
        blockwise = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
        roundtrip = nearest_upsample2(avg_pool2(Tensor(blockwise)))
        np.testing.assert_array_equal(roundtrip.data, blockwise)


class TestConcat:
    def test_paper_shapes(self):
        a, b = Tensor(np.zeros((1, 512, 2, 2))), Tensor(np.ones((1, 512, 2, 2)))
        assert concat_channels(a, b).shape == (1, 1024, 2, 2)

    def test_empty_channel_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        out = concat_channels(x, Tensor(np.zeros((2, 0, 4, 4))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_slices_recover_operands(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3, 2, 2))), Tensor(rng.normal(size=(2, 5, 2, 2)))
        joined = concat_channels(a, b)
        np.testing.assert_array_equal(narrow_channels(joined, 0, 3).data, a.data)
        np.testing.assert_array_equal(narrow_channels(joined, 3, 8).data, b.data)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 4, 4))))

    def test_backward_splits_at_boundary(self, rng):
        a, b = leaf(rng, 1, 2, 3, 3), leaf(rng, 1, 3, 3, 3)
        weights = Tensor(rng.normal(size=(1, 5, 3, 3)))
        error = check_gradients(lambda: (concat_channels(a, b) * weights).sum(), [a, b])
        assert error < GRAD_TOL


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            (x * 2.0).backward()

    def test_graph_consumed(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(GraphError, match="consumed"):
            loss.backward()

    def test_diamond_sums_branches(self, rng):
        """A shared subexpression receives the sum of both branch gradients."""
        x = leaf(rng, 5)

        def loss():
            shared = x.exp()
            return (shared * x + shared.sigmoid()).sum()

        assert check_gradients(loss, [x]) < GRAD_TOL

    def test_no_grad_builds_no_graph(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert y.is_leaf


def _op_losses(rng):
    """Scalar losses over each differentiable op with fresh random leaves."""
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    pos = leaf(rng, 2, 3, low=0.5, high=2.0)
    col = leaf(rng, 2, 1)
    img = leaf(rng, 1, 2, 4, 4)
    ker = leaf(rng, 3, 2, 3, 3)
    ker2 = leaf(rng, 3, 2, 2, 2)
    w = Tensor(rng.normal(size=(2, 3)))
    return [
        ("add", lambda: ((a + b) * w).sum(), [a, b]),
        ("sub", lambda: ((a - b) * w).sum(), [a, b]),
        ("mul", lambda: (a * b).sum(), [a, b]),
        ("div", lambda: (a / pos).sum(), [a, pos]),
        ("neg", lambda: (-a * w).sum(), [a]),
        ("pow", lambda: (pos**-0.5).sum(), [pos]),
        ("exp", lambda: (a.exp() * w).sum(), [a]),
        ("log", lambda: (pos.log() * w).sum(), [pos]),
        ("sigmoid", lambda: (a.sigmoid() * w).sum(), [a]),
        ("broadcast", lambda: (a * col).sum(), [a, col]),
        ("mean", lambda: (a * a).mean(axis=1).sum(), [a]),
        ("reshape", lambda: (a.reshape(3, 2) * a.reshape(3, 2)).sum(), [a]),
        ("take_rows", lambda: (a.take_rows([1, 1, 0]) ** 2.0).sum(), [a]),
        ("conv3x3", lambda: (conv2d(img, ker, pad=1) ** 2.0).sum(), [img, ker]),
        ("conv2x2", lambda: (conv2d(img, ker2, stride=2) ** 2.0).sum(), [img, ker2]),
        ("avg_pool2", lambda: (avg_pool2(img) ** 2.0).sum(), [img]),
        ("upsample", lambda: (nearest_upsample2(img) ** 2.0).sum(), [img]),
    ]


class TestGradientSuite:
    @pytest.mark.parametrize("instance", range(20))
    def test_every_op_matches_finite_differences(self, instance):
        """Analytic gradients agree with central differences on random instances."""
        rng = np.random.default_rng(100 + instance)
        for name, loss, inputs in _op_losses(rng):
            error = check_gradients(loss, inputs, h=1e-5)
            assert error < GRAD_TOL, f"{name}: relative error {error:.2e}"

    @pytest.mark.parametrize("instance", range(20))
    def test_leaky_relu_away_from_kink(self, instance):
        rng = np.random.default_rng(200 + instance)
        values = rng.uniform(0.1, 1.0, size=6) * rng.choice([-1.0, 1.0], size=6)
        x = Tensor(values, requires_grad=True)
        assert check_gradients(lambda: (x.leaky_relu(0.2) ** 2.0).sum(), [x]) < GRAD_TOL


class TestTensorBasics:
    def test_item_requires_single_element(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_data_is_float64(self):
        assert Tensor([1, 2]).data.dtype == np.float64

    def test_detach_drops_grad_tracking(self):
        x = Tensor([1.0], requires_grad=True)
        assert not (x * 2.0).detach().requires_grad
