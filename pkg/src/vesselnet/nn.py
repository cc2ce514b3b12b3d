"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .conv import conv, transposed_conv
from .tensor import Tensor


def param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Minimal module: attributes holding parameters or submodules are discovered by reflection."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class Conv(Module):
    """2D/3D convolution; dimensionality fixed at construction."""

    def __init__(self, c_in, c_out, kernel, *, nd=2, stride=1, padding=0, bias=True, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        k = (kernel,) * nd if isinstance(kernel, int) else tuple(kernel)
        fan_in = c_in * int(np.prod(k))
        # He init for LeakyReLU stacks
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in, *k)), dtype)
        self.bias = param(np.zeros(c_out), dtype) if bias else None
        self.stride, self.padding, self.nd = stride, padding, nd

    def forward(self, x: Tensor) -> Tensor:
        return conv(x, self.weight, self.bias, self.stride, self.padding)


class Deconv(Module):
    def __init__(self, c_in, c_out, kernel=2, *, nd=2, stride=2, bias=True, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        k = (kernel,) * nd if isinstance(kernel, int) else tuple(kernel)
        fan_in = c_in * int(np.prod(k)) // int(np.prod((stride,) * nd if isinstance(stride, int) else stride))
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), (c_in, c_out, *k)), dtype)
        self.bias = param(np.zeros(c_out), dtype) if bias else None
        self.stride, self.nd = stride, nd

    def forward(self, x: Tensor) -> Tensor:
        return transposed_conv(x, self.weight, self.bias, self.stride)


class Linear(Module):
    def __init__(self, d_in, d_out, *, bias=True, rng=None, dtype=np.float32, std=None):
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(1.0 / d_in) if std is None else std
        self.weight = param(rng.normal(0.0, std, (d_out, d_in)), dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ChannelLayerNorm(Module):
    """Layer norm over channels and space of each sample, per-channel affine.

    A spatially shaped affine would tie the weights to the input size, so the
    scale/shift are per channel.
    """

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        self.weight = param(np.ones(channels), dtype)
        self.bias = param(np.zeros(channels), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
        y = T.layer_norm(x, tuple(range(1, x.ndim)), self.eps)
        return y * self.weight.reshape(shape) + self.bias.reshape(shape)


class TokenLayerNorm(Module):
    """Layer norm over the last (feature) axis of a token sequence."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.weight = param(np.ones(dim), dtype)
        self.bias = param(np.zeros(dim), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, -1, self.eps) * self.weight + self.bias
