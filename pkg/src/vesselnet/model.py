"""Model configuration and the assembled encoder / bottleneck / decoder graph."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .decoder import BFDecoder, InstanceHeads, SemanticHead
from .encoder import ConfigurationError, HiEncoder
from .nn import Module
from .tensor import Tensor
from .vision_mamba import Bottleneck

# (texture_aware, mamba_bottleneck, bifocal_decoder)
ABLATIONS = {
    "baseline": (False, False, False),
    "texture": (True, False, False),
    "mamba": (False, True, False),
    "hi_encoder": (True, True, False),
    "full": (True, True, True),
}


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 2
    dims: int = 2
    depth: int = 4
    base_width: int = 48
    d_state: int = 16
    n_blocks: int = 16
    mode: str = "semantic"
    num_types: int = 2
    texture_aware: bool = True
    mamba_bottleneck: bool = True
    bifocal_decoder: bool = True
    per_direction_ssm: bool = False
    residual: str = "literal"
    mlp_ratio: int = 2
    expand: int = 1
    chunk: int = 32
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise ConfigurationError(f"dims must be 2 or 3, got {self.dims}")
        if self.mode not in ("semantic", "instance"):
            raise ConfigurationError(f"mode must be semantic or instance, got {self.mode!r}")
        if self.depth < 0 or self.base_width < 1 or self.d_state < 1 or self.n_blocks < 0:
            raise ConfigurationError("depth/base_width/d_state/n_blocks out of range")
        if self.mode == "instance" and self.num_types < 2:
            raise ConfigurationError("instance mode needs num_types >= 2 (type 0 is background)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")

    @classmethod
    def variant(cls, name: str, **overrides) -> "ModelConfig":
        ta, mb, bf = ABLATIONS[name]
        return cls(texture_aware=ta, mamba_bottleneck=mb, bifocal_decoder=bf, **overrides)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                kwargs[f.name] = _coerce(d[f.name], f.type)
        return cls(**kwargs)


def _coerce(value, type_name):
    if not isinstance(value, str):
        return value
    if type_name in ("bool", bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {value!r}")
    if type_name in ("int", int):
        return int(value)
    if type_name in ("float", float):
        return float(value)
    return value


class SegModel(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        dtype = np.dtype(config.dtype).type
        nd, w, depth = config.dims, config.base_width, config.depth
        self.encoder = HiEncoder(config.in_channels, depth=depth, base_width=w, nd=nd,
                                 texture_aware=config.texture_aware, residual=config.residual,
                                 rng=rng, dtype=dtype)
        bottom = w * 2 ** depth
        n_blocks = config.n_blocks if config.mamba_bottleneck else 0
        self.bottleneck = Bottleneck(bottom, n_blocks, config.d_state, mlp_ratio=config.mlp_ratio,
                                     per_direction=config.per_direction_ssm, expand=config.expand,
                                     chunk=config.chunk, rng=rng, dtype=dtype)
        self.decoder = BFDecoder(depth=depth, base_width=w, nd=nd, bifocal=config.bifocal_decoder,
                                 rng=rng, dtype=dtype)
        if config.mode == "semantic":
            self.head = SemanticHead(w, config.num_classes, nd=nd, rng=rng, dtype=dtype)
        else:
            self.head = InstanceHeads(w, config.num_types, nd=nd, rng=rng, dtype=dtype)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def features(self, image: Tensor) -> Tensor:
        enc = self.encoder(image)
        g = self.bottleneck(enc.bottom)
        return self.decoder(g, enc.skips)

    def forward(self, image: Tensor):
        """Semantic logits ``(N, classes, *S)`` or the ``(NP, HV, NT)`` triple."""
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=self.dtype))
        return self.head(self.features(image))

    predict = forward

    def bottleneck_input(self, image: Tensor) -> Tensor:
        return self.encoder(image).bottom
