import numpy as np
import pytest

from src.config import LossWeights, ModelConfig, TripletConfig
from src.losses import compute_losses
from src.models import Diagnosis, Triplet
from src.tensor import ShapeError, Tensor, check_gradients
from src.vae import MultiModalVae, VaeOutput, reparameterize


def _batch(rng, n, size=8):
    return rng.uniform(size=(n, 3, size, size)), rng.uniform(size=(n, 1, size, size))


class TestArchitecture:
    def test_paper_parameter_count(self):
        """64 px, 128-d latent and the full width schedules."""
        model = MultiModalVae(ModelConfig.paper(), seed=None)
        assert model.parameter_count() == 31873028

    def test_desk_shapes(self, rng):
        model = MultiModalVae(ModelConfig.desk(), seed=0)
        image, wbt = _batch(rng, 2, size=32)
        out = model(image, wbt, rng=rng)
        assert out.recon_image.shape == (2, 3, 32, 32)
        assert out.recon_wbt.shape == (2, 1, 32, 32)
        assert out.mu.shape == out.logvar.shape == out.z.shape == (2, 16)

    def test_separate_wbt_schedules(self, rng):
        config = ModelConfig(
            image_size=8,
            latent_dim=3,
            enc_widths=[4, 6],
            dec_widths=[6, 4, 4],
            wbt_enc_widths=[2, 2],
            wbt_dec_widths=[2, 2, 2],
        )
        model = MultiModalVae(config, seed=0)
        assert model.mu_head.in_channels == 8
        out = model(*_batch(rng, 3), rng=rng)
        assert out.recon_wbt.shape == (3, 1, 8, 8)


class TestForward:
    def test_reconstructions_in_unit_interval(self, tiny_model_config, rng):
        model = MultiModalVae(tiny_model_config, seed=0)
        out = model(*_batch(rng, 4), rng=rng)
        assert isinstance(out, VaeOutput)
        for recon in (out.recon_image, out.recon_wbt):
            assert recon.data.min() > 0.0 and recon.data.max() < 1.0

    def test_same_seed_same_model(self, tiny_model_config):
        a = MultiModalVae(tiny_model_config, seed=4)
        b = MultiModalVae(tiny_model_config, seed=4)
        for name, param in a.parameters().items():
            np.testing.assert_array_equal(param.data, b.parameters()[name].data)

    def test_eval_mode_is_deterministic(self, tiny_model_config, rng):
        model = MultiModalVae(tiny_model_config, seed=0).eval()
        image, wbt = _batch(rng, 2)
        mu_a, _ = model.encode(image, wbt)
        mu_b, _ = model.encode(image, wbt)
        np.testing.assert_array_equal(mu_a.data, mu_b.data)

    def test_encode_rejects_wrong_shapes(self, tiny_model_config, rng):
        model = MultiModalVae(tiny_model_config, seed=0)
        image, wbt = _batch(rng, 2)
        with pytest.raises(ShapeError):
            model.encode(image[:, :1], wbt)
        with pytest.raises(ShapeError):
            model.encode(image, wbt[:1])
        with pytest.raises(ShapeError):
            model.encode(image, rng.uniform(size=(2, 1, 16, 16)))

    def test_decode_rejects_wrong_latent(self, tiny_model_config):
        model = MultiModalVae(tiny_model_config, seed=0)
        with pytest.raises(ShapeError):
            model.decode(np.zeros((2, 5)))


class TestFusion:
    def test_wbt_input_moves_the_mean(self, tiny_model_config, rng):
        """mu depends on the WBT branch, not only on the image."""
        model = MultiModalVae(tiny_model_config, seed=0).eval()
        image, wbt = _batch(rng, 3)
        mu, _ = model.encode(image, wbt)
        mu_blank, _ = model.encode(image, np.zeros_like(wbt))
        assert np.abs(mu.data - mu_blank.data).max() > 1e-8

    def test_mean_has_gradient_wrt_both_inputs(self, tiny_model_config, rng):
        model = MultiModalVae(tiny_model_config, seed=0).eval()
        raw_image, raw_wbt = _batch(rng, 2)
        image = Tensor(raw_image, requires_grad=True)
        wbt = Tensor(raw_wbt, requires_grad=True)
        mu, _ = model.encode(image, wbt)
        mu.sum().backward()
        assert image.grad is not None and np.abs(image.grad).max() > 0.0
        assert wbt.grad is not None and np.abs(wbt.grad).max() > 0.0

    def test_zero_logvar_head_gives_unit_noise(self, tiny_model_config, rng):
        """With the log-variance head zeroed, z = mu + eps exactly."""
        model = MultiModalVae(tiny_model_config, seed=0).eval()
        model.logvar_head.weight.data[...] = 0.0
        model.logvar_head.bias.data[...] = 0.0
        image, wbt = _batch(rng, 3)
        out = model(image, wbt, rng=np.random.default_rng(5))
        eps = np.random.default_rng(5).standard_normal((3, tiny_model_config.latent_dim))
        np.testing.assert_array_equal(out.logvar.data, np.zeros((3, tiny_model_config.latent_dim)))
        np.testing.assert_allclose(out.z.data, out.mu.data + eps, rtol=0, atol=1e-15)


class TestReparameterize:
    def test_zero_eps_returns_mean(self, rng):
        mu = Tensor(rng.normal(size=(3, 4)))
        logvar = Tensor(rng.normal(size=(3, 4)))
        z = reparameterize(mu, logvar, eps=np.zeros((3, 4)))
        np.testing.assert_array_equal(z.data, mu.data)

    def test_scale_follows_logvar(self):
        mu = Tensor(np.zeros((1, 2)))
        logvar = Tensor(np.log(np.array([[4.0, 9.0]])))
        z = reparameterize(mu, logvar, eps=np.ones((1, 2)))
        np.testing.assert_allclose(z.data, [[2.0, 3.0]])

    def test_gradients_reach_mean_and_logvar(self, rng):
        mu = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        logvar = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        eps = rng.standard_normal((2, 3))

        def loss():
            z = reparameterize(mu, logvar, eps=eps)
            return (z * z).sum()

        assert check_gradients(loss, [mu, logvar]) < 1e-6

    def test_eps_shape_mismatch(self):
        mu = Tensor(np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            reparameterize(mu, Tensor(np.zeros((2, 3))), eps=np.zeros((3, 2)))

    def test_sample_statistics(self):
        mu = Tensor(np.full((20000, 1), 1.5))
        logvar = Tensor(np.full((20000, 1), np.log(0.25)))
        z = reparameterize(mu, logvar, rng=np.random.default_rng(0)).data
        assert abs(z.mean() - 1.5) < 0.02
        assert abs(z.std() - 0.5) < 0.02


class TestEndToEndGradient:
    def test_full_objective_gradient(self, tiny_model_config):
        """Backward through both encoders, the heads, both decoders and all four losses."""
        rng = np.random.default_rng(21)
        model = MultiModalVae(tiny_model_config, seed=21)
        image, wbt = _batch(rng, 6)
        labels = [Diagnosis.AOM, Diagnosis.AOM, Diagnosis.OME, Diagnosis.OME, Diagnosis.NOE, Diagnosis.NOE]
        eps = rng.standard_normal((6, tiny_model_config.latent_dim))
        triplets = [Triplet(0, 1, 2), Triplet(2, 3, 4), Triplet(4, 5, 0)]
        weights = LossWeights(ssim_window=3)
        triplet_cfg = TripletConfig(margin=5.0)

        def loss():
            mu, logvar = model.encode(image, wbt)
            z = model.reparameterize(mu, logvar, eps=eps)
            recon_image, recon_wbt = model.decode(z)
            output = VaeOutput(recon_image, recon_wbt, mu, logvar, z)
            total, _ = compute_losses(output, image, wbt, labels, weights, triplet_cfg, triplets)
            return total

        params = model.parameters()
        chosen = [
            params["image_encoder.blocks.0.conv1.weight"],
            params["wbt_encoder.blocks.1.skip.weight"],
            params["mu_head.weight"],
            params["logvar_head.bias"],
            params["image_decoder.final.weight"],
            params["wbt_decoder.blocks.2.bn2.gamma"],
        ]
        assert check_gradients(loss, chosen, h=1e-6, max_entries=4, rng=rng) < 1e-4
