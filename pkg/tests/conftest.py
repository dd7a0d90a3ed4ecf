import numpy as np
import pytest

from src.config import AugmentConfig, LossWeights, ModelConfig, TrainConfig


@pytest.fixture(autouse=True)
def debug_mode():
    """Check every op for NaN/Inf while testing."""
    from src.tensor import is_debug_mode, set_debug_mode

    previous = is_debug_mode()
    set_debug_mode(True)
    yield
    set_debug_mode(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """8 px inputs, two encoder blocks, three decoder blocks."""
    return ModelConfig(image_size=8, latent_dim=4, enc_widths=[4, 4], dec_widths=[4, 4, 4])


@pytest.fixture
def tiny_train_config(tiny_model_config):
    return TrainConfig(
        preset="desk",
        epochs=2,
        per_class_batch=2,
        seed=3,
        checkpoint_every=1,
        model=tiny_model_config,
        loss=LossWeights(ssim_window=3),
        augment=AugmentConfig.disabled(),
    )


@pytest.fixture(scope="session")
def tiny_dataset():
    """Five samples per class at 8 px."""
    from src.synth import synth_dataset

    return synth_dataset(5, 8, seed=11)
