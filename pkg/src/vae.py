from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from src.config import ModelConfig
from src.layers import Conv2dLayer, Decoder, Encoder, Module, init_params
from src.tensor import ShapeError, Tensor, concat_channels

InputLike = Union[Tensor, np.ndarray]


@dataclass
class VaeOutput:
    """Everything one forward pass produces that the loss needs."""

    recon_image: Tensor
    recon_wbt: Tensor
    mu: Tensor
    logvar: Tensor
    z: Tensor


class MultiModalVae(Module):
    """
    Image and WBT encoders fused into one latent space, decoded by two decoders.

    Both encoder outputs are concatenated along channels; two independent 2x2
    valid convolutions read the mean and log-variance off the fused map.
    """

    def __init__(self, config: ModelConfig, seed: Optional[int] = 0):
        self.config = config
        block_args = (config.leaky_slope, config.bn_momentum, config.bn_eps)

        self.image_encoder = Encoder(config.image_channels, config.image_enc_widths, *block_args)
        self.wbt_encoder = Encoder(config.wbt_channels, config.wbt_encoder_widths, *block_args)

        fused = config.image_enc_widths[-1] + config.wbt_encoder_widths[-1]
        self.mu_head = Conv2dLayer(fused, config.latent_dim, 2)
        self.logvar_head = Conv2dLayer(fused, config.latent_dim, 2)

        self.image_decoder = Decoder(
            config.latent_dim, config.image_dec_widths, config.image_channels, *block_args
        )
        self.wbt_decoder = Decoder(
            config.latent_dim, config.wbt_decoder_widths, config.wbt_channels, *block_args
        )

        if seed is not None:
            init_params(self, seed)

    def _check_pair(self, image: Tensor, wbt: Tensor) -> None:
        size = self.config.image_size
        expected_image = (self.config.image_channels, size, size)
        expected_wbt = (self.config.wbt_channels, size, size)
        if image.ndim != 4 or image.shape[1:] != expected_image:
            raise ShapeError(f"Image batch must be (N, {expected_image}), got {image.shape}")
        if wbt.ndim != 4 or wbt.shape[1:] != expected_wbt:
            raise ShapeError(f"WBT batch must be (N, {expected_wbt}), got {wbt.shape}")
        if image.shape[0] != wbt.shape[0]:
            raise ShapeError(f"Batch sizes differ: {image.shape[0]} images, {wbt.shape[0]} WBTs")

    def encode(self, image: InputLike, wbt: InputLike) -> Tuple[Tensor, Tensor]:
        """Return the (N, latent_dim) mean and log-variance for a paired batch."""
        image = image if isinstance(image, Tensor) else Tensor(image)
        wbt = wbt if isinstance(wbt, Tensor) else Tensor(wbt)
        self._check_pair(image, wbt)

        fused = concat_channels(self.image_encoder(image), self.wbt_encoder(wbt))
        n, latent = image.shape[0], self.config.latent_dim
        mu = self.mu_head(fused).reshape(n, latent)
        logvar = self.logvar_head(fused).reshape(n, latent)
        return mu, logvar

    def reparameterize(
        self,
        mu: Tensor,
        logvar: Tensor,
        rng: Optional[np.random.Generator] = None,
        eps: Optional[np.ndarray] = None,
    ) -> Tensor:
        return reparameterize(mu, logvar, rng=rng, eps=eps)

    def decode(self, z: InputLike) -> Tuple[Tensor, Tensor]:
        """Map (N, latent_dim) codes to an image batch and a WBT batch in (0, 1)."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"Latent batch must be (N, {self.config.latent_dim}), got {z.shape}")
        grid = z.reshape(z.shape[0], self.config.latent_dim, 1, 1)
        return self.image_decoder(grid), self.wbt_decoder(grid)

    def forward(
        self, image: InputLike, wbt: InputLike, rng: Optional[np.random.Generator] = None
    ) -> VaeOutput:
        mu, logvar = self.encode(image, wbt)
        z = self.reparameterize(mu, logvar, rng=rng)
        recon_image, recon_wbt = self.decode(z)
        return VaeOutput(recon_image=recon_image, recon_wbt=recon_wbt, mu=mu, logvar=logvar, z=z)

    __call__ = forward


def reparameterize(
    mu: Tensor,
    logvar: Tensor,
    rng: Optional[np.random.Generator] = None,
    eps: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Draw z = mu + exp(0.5 * logvar) * eps with eps ~ N(0, I).

    Gradients reach `mu` and `logvar`; `eps` is a constant. Pass `eps`
    explicitly (e.g. zeros) to bypass sampling.
    """
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(mu.shape)
    elif eps.shape != mu.shape:
        raise ShapeError(f"eps {eps.shape} does not match mu {mu.shape}")
    return mu + (logvar * 0.5).exp() * eps
