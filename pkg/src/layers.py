"""
Parameterized layers and the residual down/up sampling blocks.
"""

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.tensor import Tensor, avg_pool2, conv2d, nearest_upsample2

SUPPORTED_KERNELS = (1, 2, 3)


class Module:
    """Minimal container that discovers parameters and sub-modules by attribute."""

    training: bool = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, list):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{index}", item

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        """
        Walk this module and every sub-module depth first.

        Args:
            prefix: Dotted path prepended to every yielded name

        Yields:
            (dotted prefix, module) pairs, starting with `self`
        """
        yield prefix, self
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}{name}.")

    def parameters(self) -> Dict[str, Tensor]:
        """Trainable tensors keyed by dotted attribute path, in definition order."""
        params: Dict[str, Tensor] = {}
        for prefix, module in self.named_modules():
            for name, child in module._children():
                if isinstance(child, Tensor) and child.requires_grad:
                    params[f"{prefix}{name}"] = child
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        """Non-trainable state (batch-norm running statistics)."""
        found: Dict[str, np.ndarray] = {}
        for prefix, module in self.named_modules():
            for name, value in module._own_buffers().items():
                found[f"{prefix}{name}"] = value
        return found

    def _own_buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def train(self, mode: bool = True) -> "Module":
        """
        Set the training flag on this module and all sub-modules.

        Args:
            mode: True for batch statistics and stochastic sampling, False for eval

        Returns:
            self
        """
        for _, module in self.named_modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters().values():
            param.zero_grad()

    def parameter_count(self) -> int:
        return sum(param.size for param in self.parameters().values())


class Conv2dLayer(Module):
    """Square-kernel convolution with bias."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        pad: Optional[int] = None,
    ):
        if kernel_size not in SUPPORTED_KERNELS:
            raise ValueError(f"kernel_size must be one of {SUPPORTED_KERNELS}, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        # Odd kernels keep the spatial size, even kernels run "valid"
        self.pad = pad if pad is not None else (kernel_size // 2 if kernel_size % 2 else 0)
        self.weight = Tensor(
            np.zeros((out_channels, in_channels, kernel_size, kernel_size)), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size * self.kernel_size

    def __call__(self, x: Tensor) -> Tensor:
        """
        Convolve `x` and add the per-channel bias.

        Args:
            x: Input of shape (B, in_channels, H, W)

        Returns:
            Tensor of shape (B, out_channels, H', W'), where H' and W' follow from stride and pad
        """
        out = conv2d(x, self.weight, stride=self.stride, pad=self.pad)
        return out + self.bias.reshape(1, self.out_channels, 1, 1)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def _own_buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def reset(self) -> None:
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def normalize(self, x: Tensor) -> Tensor:
        """The normalized input before the gamma/beta affine map."""
        if self.training:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            self._update_running_stats(mean.data.reshape(-1), var.data.reshape(-1), x)
            return centered * (var + self.eps) ** -0.5

        shape = (1, self.channels, 1, 1)
        scale = 1.0 / np.sqrt(self.running_var + self.eps)
        return (x - self.running_mean.reshape(shape)) * scale.reshape(shape)

    def _update_running_stats(self, mean: np.ndarray, var: np.ndarray, x: Tensor) -> None:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / (count - 1) if count > 1 else var
        self.running_mean *= 1.0 - self.momentum
        self.running_mean += self.momentum * mean
        self.running_var *= 1.0 - self.momentum
        self.running_var += self.momentum * unbiased

    def __call__(self, x: Tensor) -> Tensor:
        """
        Normalize `x` per channel, then apply gamma and beta.

        In training mode the batch statistics are used and folded into the
        running buffers; in eval mode only the running buffers are read.
        """
        shape = (1, self.channels, 1, 1)
        return self.normalize(x) * self.gamma.reshape(*shape) + self.beta.reshape(*shape)


class _ResidualBlock(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        leaky_slope: float = 0.2,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.leaky_slope = leaky_slope
        self.conv1 = Conv2dLayer(in_channels, out_channels, 3)
        self.bn1 = BatchNorm2d(out_channels, bn_momentum, bn_eps)
        self.conv2 = Conv2dLayer(out_channels, out_channels, 3)
        self.bn2 = BatchNorm2d(out_channels, bn_momentum, bn_eps)
        self.skip = Conv2dLayer(in_channels, out_channels, 1)

    def _main_path(self, x: Tensor) -> Tensor:
        x = self.bn1(self.conv1(x)).leaky_relu(self.leaky_slope)
        return self.bn2(self.conv2(x)).leaky_relu(self.leaky_slope)


class ResidualDownBlock(_ResidualBlock):
    """Two 3x3 conv/BN/LeakyReLU stages then 2x2 average pooling, plus a pooled 1x1 skip."""

    def __call__(self, x: Tensor) -> Tensor:
        return forward_down(self, x)


class ResidualUpBlock(_ResidualBlock):
    """Nearest 2x upsampling then two 3x3 conv/BN/LeakyReLU stages, plus an upsampled 1x1 skip."""

    def __call__(self, x: Tensor) -> Tensor:
        return forward_up(self, x)


def forward_down(block: ResidualDownBlock, x: Tensor) -> Tensor:
    """
    Halve the spatial extents of `x` and map its channels to `block.out_channels`.

    Args:
        block: Block holding the two conv/BN stages and the 1x1 skip
        x: Input of shape (B, block.in_channels, H, W) with even H and W

    Returns:
        Tensor of shape (B, block.out_channels, H / 2, W / 2)
    """
    main = avg_pool2(block._main_path(x))
    skip = avg_pool2(block.skip(x))
    return main + skip


def forward_up(block: ResidualUpBlock, x: Tensor) -> Tensor:
    """
    Double the spatial extents of `x` and map its channels to `block.out_channels`.

    Args:
        block: Block holding the two conv/BN stages and the 1x1 skip
        x: Input of shape (B, block.in_channels, H, W)

    Returns:
        Tensor of shape (B, block.out_channels, 2H, 2W)
    """
    upsampled = nearest_upsample2(x)
    return block._main_path(upsampled) + block.skip(upsampled)


class Encoder(Module):
    """A chain of residual downsampling blocks."""

    def __init__(
        self,
        in_channels: int,
        widths: List[int],
        leaky_slope: float = 0.2,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        channels = [in_channels] + list(widths)
        self.blocks = [
            ResidualDownBlock(c_in, c_out, leaky_slope, bn_momentum, bn_eps)
            for c_in, c_out in zip(channels[:-1], channels[1:])
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Decoder(Module):
    """Residual upsampling blocks, a final 3x3 conv and a logistic squash."""

    def __init__(
        self,
        in_channels: int,
        widths: List[int],
        out_channels: int,
        leaky_slope: float = 0.2,
        bn_momentum: float = 0.1,
        bn_eps: float = 1e-5,
    ):
        channels = [in_channels] + list(widths)
        self.blocks = [
            ResidualUpBlock(c_in, c_out, leaky_slope, bn_momentum, bn_eps)
            for c_in, c_out in zip(channels[:-1], channels[1:])
        ]
        self.final = Conv2dLayer(channels[-1], out_channels, 3)

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.final(x).sigmoid()


def init_params(module: Module, seed: int) -> Dict[str, Tensor]:
    """
    Deterministically initialize every layer below `module`.

    Convolutions draw weight and bias from U(-b, b) with b = sqrt(1 / fan_in);
    batch norms get gamma = 1, beta = 0 and fresh running statistics.

    Args:
        module: Root of the layers to initialize
        seed: Seed of the generator, drawn in module definition order

    Returns:
        The parameters of `module`
    """
    rng = np.random.default_rng(seed)
    for _, layer in module.named_modules():
        if isinstance(layer, Conv2dLayer):
            bound = math.sqrt(1.0 / layer.fan_in)
            layer.weight.data[...] = rng.uniform(-bound, bound, size=layer.weight.shape)
            layer.bias.data[...] = rng.uniform(-bound, bound, size=layer.bias.shape)
        elif isinstance(layer, BatchNorm2d):
            layer.reset()
    return module.parameters()
