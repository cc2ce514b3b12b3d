"""Texture-aware convolutional encoder stages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ChannelLayerNorm, Conv, Module
from .tensor import DimensionError, Tensor

LEAKY_SLOPE = 0.01


class ConfigurationError(ValueError):
    pass


class ConvBlock(Module):
    """``f = LeakyReLU(Norm(W * x + b))`` plus an optional residual step.

    ``residual`` selects the residual step:
      - ``"literal"``: ``f <- LeakyReLU(f) + f``
      - ``"skip"``: ``f <- f + x`` (conventional skip; needs matching shapes)
      - ``"none"``: plain block
    """

    def __init__(self, c_in, c_out, kernel=3, *, stride=1, padding=1, nd=2, residual="literal",
                 rng=None, dtype=np.float32):
        if residual not in ("literal", "skip", "none"):
            raise ConfigurationError(f"unknown residual mode {residual!r}")
        self.conv = Conv(c_in, c_out, kernel, nd=nd, stride=stride, padding=padding, rng=rng, dtype=dtype)
        self.norm = ChannelLayerNorm(c_out, dtype=dtype)
        self.residual = residual

    def forward(self, x: Tensor) -> Tensor:
        f = T.leaky_relu(self.norm(self.conv(x)), LEAKY_SLOPE)
        if self.residual == "literal":
            f = T.leaky_relu(f, LEAKY_SLOPE) + f
        elif self.residual == "skip":
            if f.shape != x.shape:
                raise DimensionError(f"skip residual needs equal shapes, got {x.shape} -> {f.shape}")
            f = f + x
        return f


class PoolDownsample(Module):
    """Max-pool then 1x1 conv doubling channels (the non-texture-aware baseline)."""

    def __init__(self, c_in, c_out, *, nd=2, rng=None, dtype=np.float32):
        self.proj = ConvBlock(c_in, c_out, 1, padding=0, nd=nd, residual="none", rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(T.max_pool(x, 2))


class TextureAwareLayer(Module):
    """3x3 residual conv block, then a learnable 2x2 stride-2 downsample (channels x2)."""

    def __init__(self, channels: int, *, nd=2, texture_aware=True, residual="literal", rng=None, dtype=np.float32):
        mode = residual if texture_aware else "none"
        self.block = ConvBlock(channels, channels, 3, padding=1, nd=nd, residual=mode, rng=rng, dtype=dtype)
        if texture_aware:
            self.down = ConvBlock(channels, 2 * channels, 2, stride=2, padding=0, nd=nd,
                                  residual="literal" if residual == "literal" else "none", rng=rng, dtype=dtype)
        else:
            self.down = PoolDownsample(channels, 2 * channels, nd=nd, rng=rng, dtype=dtype)
        self.channels = channels

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns ``(skip, downsampled)``; the skip is taken before downsampling."""
        f = self.block(x)
        return f, self.down(f)


@dataclass
class HiEncoderOutput:
    skips: list  # f_1 ... f_I, finest first
    bottom: Tensor


class HiEncoder(Module):
    def __init__(self, in_channels: int, *, depth=4, base_width=48, nd=2, texture_aware=True,
                 residual="literal", rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.nd, self.depth, self.base_width = nd, depth, base_width
        self.stem = Conv(in_channels, base_width, 3, nd=nd, padding=1, rng=rng, dtype=dtype)
        self.layers = [
            TextureAwareLayer(base_width * 2 ** i, nd=nd, texture_aware=texture_aware, residual=residual,
                              rng=rng, dtype=dtype)
            for i in range(depth)
        ]

    def check_input(self, image: Tensor) -> None:
        if image.ndim not in (4, 5):
            raise DimensionError(f"encoder input must be rank 4 (2D) or 5 (3D), got {image.shape}")
        if image.ndim - 2 != self.nd:
            raise ConfigurationError(f"model built for {self.nd}D kernels, got a rank-{image.ndim} input")
        step = 2 ** self.depth
        bad = [s for s in image.shape[2:] if s % step]
        if bad:
            need = tuple((-s) % step for s in image.shape[2:])
            raise ConfigurationError(
                f"spatial extents {image.shape[2:]} must be divisible by {step}; pad by {need} (see pad_to_multiple)"
            )

    def forward(self, image: Tensor) -> HiEncoderOutput:
        self.check_input(image)
        x = self.stem(image)
        skips = []
        for layer in self.layers:
            f, x = layer(x)
            skips.append(f)
        return HiEncoderOutput(skips, x)


def pad_to_multiple(image: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple]:
    """Zero-pad trailing edges so every spatial extent divides ``multiple``.

    Returns the padded array and the original spatial shape for cropping back.
    """
    spatial = image.shape[2:]
    widths = [(0, 0), (0, 0)] + [(0, (-s) % multiple) for s in spatial]
    return np.pad(image, widths), spatial


def crop_to(arr: np.ndarray, spatial) -> np.ndarray:
    return arr[(Ellipsis,) + tuple(slice(0, s) for s in spatial)]
