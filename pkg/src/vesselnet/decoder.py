"""Bifocal fusion decoder and output heads."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import ConvBlock
from .nn import Conv, Deconv, Module
from .tensor import DimensionError, Tensor


class FuseTop(Module):
    """``Conv1x1(DeConv2x2(G) + f_I)``; the deconv halves the channel count."""

    def __init__(self, channels: int, *, nd=2, rng=None, dtype=np.float32):
        self.up = Deconv(2 * channels, channels, 2, nd=nd, stride=2, rng=rng, dtype=dtype)
        self.proj = Conv(channels, channels, 1, nd=nd, rng=rng, dtype=dtype)
        self.channels = channels

    def forward(self, g: Tensor, f: Tensor) -> Tensor:
        up = self.up(g)
        if up.shape != f.shape:
            raise DimensionError(f"fusion wiring: upsampled global {up.shape} vs skip {f.shape}")
        return self.proj(up + f)


class DecodeStage(Module):
    """``Conv3x3(Conv3x3(DeConv2x2(F) ++ f_k))`` with ``2c -> c`` channels."""

    def __init__(self, channels: int, *, nd=2, rng=None, dtype=np.float32):
        self.up = Deconv(2 * channels, channels, 2, nd=nd, stride=2, rng=rng, dtype=dtype)
        self.conv1 = ConvBlock(2 * channels, channels, 3, nd=nd, residual="none", rng=rng, dtype=dtype)
        self.conv2 = ConvBlock(channels, channels, 3, nd=nd, residual="none", rng=rng, dtype=dtype)
        self.channels = channels

    def forward(self, prev: Tensor, f: Tensor) -> Tensor:
        up = self.up(prev)
        if up.shape[2:] != f.shape[2:]:
            raise DimensionError(f"decoder stage: upsampled extent {up.shape[2:]} vs skip {f.shape[2:]}")
        return self.conv2(self.conv1(T.concat([up, f], axis=1)))


class BFDecoder(Module):
    """Decodes from the global feature up through every encoder skip.

    ``bifocal=False`` replaces the additive top fusion with an ordinary
    concat stage (plain U-Net decoding).
    """

    def __init__(self, *, depth: int, base_width: int, nd=2, bifocal=True, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.depth, self.base_width, self.bifocal = depth, base_width, bifocal
        self.top = None
        stages = []
        for k in range(depth, 0, -1):  # k = I ... 1, channels 48 * 2^(k-1)
            c = base_width * 2 ** (k - 1)
            if k == depth and bifocal:
                self.top = FuseTop(c, nd=nd, rng=rng, dtype=dtype)
            else:
                stages.append(DecodeStage(c, nd=nd, rng=rng, dtype=dtype))
        self.stages = stages
        self._audit()

    def _audit(self) -> None:
        widths = ([self.top.channels] if self.top else []) + [s.channels for s in self.stages]
        expected = [self.base_width * 2 ** (k - 1) for k in range(self.depth, 0, -1)]
        assert widths == expected, f"decoder channel ladder {widths} != {expected}"

    def stage_channels(self) -> list[int]:
        return ([self.top.channels] if self.top else []) + [s.channels for s in self.stages]

    def forward(self, g: Tensor, skips: list) -> Tensor:
        if len(skips) != self.depth:
            raise DimensionError(f"decoder expects {self.depth} skips, got {len(skips)}")
        x = g
        remaining = list(reversed(skips))  # f_I first
        if self.top is not None:
            x = self.top(x, remaining.pop(0))
        for stage, f in zip(self.stages, remaining):
            x = stage(x, f)
        return x


class SemanticHead(Module):
    def __init__(self, channels, num_classes, *, nd=2, rng=None, dtype=np.float32):
        self.conv = Conv(channels, num_classes, 1, nd=nd, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class InstanceHeads(Module):
    """NP (2 logits), HV (2 maps in [-1, 1]) and NT (type logits) on one trunk."""

    def __init__(self, channels, num_types, *, nd=2, rng=None, dtype=np.float32):
        self.np_head = Conv(channels, 2, 1, nd=nd, rng=rng, dtype=dtype)
        self.hv_head = Conv(channels, 2, 1, nd=nd, rng=rng, dtype=dtype)
        self.nt_head = Conv(channels, num_types, 1, nd=nd, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.np_head(x), T.tanh(self.hv_head(x)), self.nt_head(x)
