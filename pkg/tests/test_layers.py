import math

import numpy as np
import pytest

from src.layers import (
    BatchNorm2d,
    Conv2dLayer,
    Decoder,
    Encoder,
    ResidualDownBlock,
    ResidualUpBlock,
    forward_down,
    forward_up,
    init_params,
)
from src.tensor import Tensor, check_gradients


class TestConv2dLayer:
    def test_odd_kernel_keeps_size(self):
        layer = Conv2dLayer(3, 5, 3)
        assert layer.pad == 1
        assert layer(Tensor(np.ones((2, 3, 8, 8)))).shape == (2, 5, 8, 8)

    def test_even_kernel_runs_valid(self):
        """The 2x2 latent heads turn a 2x2 map into a single cell."""
        layer = Conv2dLayer(4, 6, 2)
        assert layer.pad == 0
        assert layer(Tensor(np.ones((1, 4, 2, 2)))).shape == (1, 6, 1, 1)

    def test_unsupported_kernel(self):
        with pytest.raises(ValueError):
            Conv2dLayer(1, 1, 5)

    def test_fan_in(self):
        assert Conv2dLayer(3, 8, 3).fan_in == 27


class TestBatchNorm2d:
    def test_train_mode_normalizes(self, rng):
        """Per-channel output has zero mean and unit variance in train mode."""
        bn = BatchNorm2d(3)
        x = Tensor(rng.normal(5.0, 10.0, size=(8, 3, 4, 4)))
        out = bn(x).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-6)

    def test_running_stats_update(self, rng):
        bn = BatchNorm2d(2, momentum=0.1)
        x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
        bn(Tensor(x))
        count = 4 * 3 * 3
        expected_mean = 0.1 * x.mean(axis=(0, 2, 3))
        expected_var = 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * count / (count - 1)
        np.testing.assert_allclose(bn.running_mean, expected_mean)
        np.testing.assert_allclose(bn.running_var, expected_var)
        assert np.all(bn.running_var >= 0)

    def test_eval_mode_uses_running_stats(self, rng):
        bn = BatchNorm2d(2)
        bn.eval()
        assert bn.mode == "eval"
        x = rng.normal(size=(3, 2, 2, 2))
        out = bn(Tensor(x)).data
        np.testing.assert_allclose(out, x / math.sqrt(1.0 + bn.eps))
        # Deterministic and free of side effects
        np.testing.assert_array_equal(bn(Tensor(x)).data, out)
        np.testing.assert_array_equal(bn.running_mean, 0.0)


class TestResidualBlocks:
    def test_down_block_halves(self, rng):
        block = ResidualDownBlock(3, 64)
        init_params(block, seed=0)
        out = forward_down(block, Tensor(rng.uniform(size=(1, 3, 64, 64))))
        assert out.shape == (1, 64, 32, 32)

    def test_down_block_zero_weights(self, rng):
        """Zero convolutions and zero beta give an all-zero output."""
        block = ResidualDownBlock(2, 4)
        out = block(Tensor(rng.normal(size=(2, 2, 8, 8))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_up_block_doubles(self, rng):
        block = ResidualUpBlock(128, 512)
        init_params(block, seed=0)
        out = forward_up(block, Tensor(rng.normal(size=(1, 128, 1, 1))))
        assert out.shape == (1, 512, 2, 2)

    def test_up_block_zero_weights(self, rng):
        block = ResidualUpBlock(3, 2)
        out = block(Tensor(rng.normal(size=(2, 3, 2, 2))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_six_up_blocks_reach_64(self, rng):
        decoder = Decoder(4, [4, 4, 4, 4, 4, 4], out_channels=1)
        init_params(decoder, seed=1)
        out = decoder(Tensor(rng.normal(size=(2, 4, 1, 1))))
        assert out.shape == (2, 1, 64, 64)
        assert out.data.min() > 0.0 and out.data.max() < 1.0

    def test_block_parameter_count(self):
        """Two 3x3 convs, a 1x1 skip and two batch norms."""
        c_in, c_out = 3, 5
        expected = 10 * c_in * c_out + 9 * c_out * c_out + 7 * c_out
        assert ResidualDownBlock(c_in, c_out).parameter_count() == expected

    def test_gradient_through_down_block(self):
        rng = np.random.default_rng(7)
        block = ResidualDownBlock(2, 3)
        init_params(block, seed=7)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        weights = Tensor(rng.normal(size=(2, 3, 2, 2)))
        params = list(block.parameters().values())

        def loss():
            return (block(x) * weights).sum()

        assert check_gradients(loss, [x] + params, h=1e-6, max_entries=8, rng=rng) < 1e-4

    def test_gradient_through_up_block(self):
        rng = np.random.default_rng(8)
        block = ResidualUpBlock(3, 2)
        init_params(block, seed=8)
        x = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        weights = Tensor(rng.normal(size=(2, 2, 4, 4)))

        def loss():
            return (block(x) * weights).sum()

        assert check_gradients(loss, [x], h=1e-6) < 1e-4


class TestInitParams:
    def test_deterministic(self):
        a, b = Encoder(3, [4, 8]), Encoder(3, [4, 8])
        init_params(a, seed=5)
        init_params(b, seed=5)
        for (name, pa), (_, pb) in zip(a.parameters().items(), b.parameters().items()):
            np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)

    def test_fan_in_bounds_and_batch_norm_defaults(self):
        encoder = Encoder(3, [4, 8])
        init_params(encoder, seed=0)
        for name, module in encoder.named_modules():
            if isinstance(module, Conv2dLayer):
                bound = math.sqrt(1.0 / module.fan_in)
                assert np.abs(module.weight.data).max() <= bound, name
                assert np.abs(module.bias.data).max() <= bound, name
            elif isinstance(module, BatchNorm2d):
                np.testing.assert_array_equal(module.gamma.data, 1.0)
                np.testing.assert_array_equal(module.beta.data, 0.0)

    def test_parameter_names_are_dotted(self):
        names = list(Encoder(1, [2]).parameters())
        assert "blocks.0.conv1.weight" in names
        assert "blocks.0.bn2.gamma" in names
        assert "blocks.0.skip.bias" in names

    def test_buffers_expose_running_stats(self):
        buffers = Encoder(1, [2]).buffers()
        assert set(buffers) == {
            "blocks.0.bn1.running_mean",
            "blocks.0.bn1.running_var",
            "blocks.0.bn2.running_mean",
            "blocks.0.bn2.running_var",
        }
