"""Four-direction 2D selective scan (SS2D) and the vision Mamba layer stack.

Grids are ``(batch, channels, *spatial)``; token sequences are
``(batch, L, channels)``. Row-major tokens are the flattening in C order, which
for a volume means depth slowest, then height, then width. Column-major is the
Fortran-order flattening (first spatial axis fastest).
"""

from __future__ import annotations

import enum
from functools import lru_cache

import numpy as np

from . import tensor as T
from .nn import Linear, Module, TokenLayerNorm
from .ssm import S6Block
from .tensor import DimensionError, Tensor

__all__ = [
    "ScanDirection",
    "direction_permutation",
    "order",
    "inverse_order",
    "grid_to_tokens",
    "tokens_to_grid",
    "SS2D",
    "VisionMambaLayer",
    "Bottleneck",
]


class ScanDirection(enum.IntEnum):
    ROW_FORWARD = 0
    ROW_REVERSE = 1
    COL_FORWARD = 2
    COL_REVERSE = 3

    @property
    def reverse(self) -> "ScanDirection":
        return ScanDirection(self ^ 1)


@lru_cache(maxsize=256)
def _perm(spatial: tuple, direction: int) -> np.ndarray:
    size = int(np.prod(spatial))
    if size == 0:
        raise DimensionError("empty grid")
    idx = np.arange(size)
    if direction in (ScanDirection.COL_FORWARD, ScanDirection.COL_REVERSE):
        idx = idx.reshape(spatial).ravel(order="F")
    if direction in (ScanDirection.ROW_REVERSE, ScanDirection.COL_REVERSE):
        idx = idx[::-1]
    idx = np.ascontiguousarray(idx)
    idx.setflags(write=False)
    return idx


def direction_permutation(spatial, direction) -> np.ndarray:
    """Row-major flat index visited at each step of ``direction``."""
    return _perm(tuple(int(s) for s in spatial), int(ScanDirection(direction)))


def inverse_permutation(spatial, direction) -> np.ndarray:
    return np.argsort(direction_permutation(spatial, direction))


def grid_to_tokens(z: Tensor) -> Tensor:
    b, c = z.shape[:2]
    return z.reshape(b, c, -1).permute(0, 2, 1)


def tokens_to_grid(tokens: Tensor, spatial) -> Tensor:
    b, L, c = tokens.shape
    if L != int(np.prod(spatial)):
        raise DimensionError(f"{L} tokens cannot fill a grid of {tuple(spatial)}")
    return tokens.permute(0, 2, 1).reshape(b, c, *spatial)


def order(z: Tensor, direction) -> Tensor:
    """Flatten grid ``z`` into the token sequence of ``direction``."""
    if z.ndim < 3:
        raise DimensionError(f"order expects (batch, channels, *spatial), got {z.shape}")
    return T.index_select(grid_to_tokens(z), direction_permutation(z.shape[2:], direction), axis=1)


def inverse_order(seq: Tensor, direction, spatial) -> Tensor:
    """Put a direction-ordered sequence back onto its grid."""
    if seq.shape[1] != int(np.prod(spatial)):
        raise DimensionError(f"sequence length {seq.shape[1]} != grid size {int(np.prod(spatial))}")
    return tokens_to_grid(T.index_select(seq, inverse_permutation(spatial, direction), axis=1), spatial)


class SS2D(Module):
    """Scan in four directions, run S6 on each, restore, and sum.

    With ``per_direction=False`` one S6 block is shared and the four sequences
    go through it as a single batch.
    """

    def __init__(self, dim: int, d_state: int = 16, *, per_direction: bool = False, expand: int = 1,
                 chunk: int = 32, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        n = 4 if per_direction else 1
        self.blocks = [S6Block(dim, d_state, expand=expand, chunk=chunk, rng=rng, dtype=dtype) for _ in range(n)]
        self.per_direction = per_direction

    def forward_tokens(self, tokens: Tensor, spatial) -> Tensor:
        """``tokens`` in row-major order; returns row-major tokens."""
        b = tokens.shape[0]
        perms = [direction_permutation(spatial, d) for d in ScanDirection]
        invs = [np.argsort(p) for p in perms]
        if self.per_direction:
            outs = [blk(T.index_select(tokens, p, axis=1)) for blk, p in zip(self.blocks, perms)]
        else:
            seqs = T.concat([T.index_select(tokens, p, axis=1) for p in perms], axis=0)
            y = self.blocks[0](seqs)
            outs = [y[k * b:(k + 1) * b] for k in range(4)]
        restored = [T.index_select(o, inv, axis=1) for o, inv in zip(outs, invs)]
        total = restored[0]
        for r in restored[1:]:
            total = total + r
        return total

    def forward(self, z: Tensor) -> Tensor:
        return tokens_to_grid(self.forward_tokens(grid_to_tokens(z), z.shape[2:]), z.shape[2:])


class VisionMambaLayer(Module):
    """``z + SS2D(LN(z))`` followed by ``z + MLP(LN(z))``."""

    def __init__(self, dim: int, d_state: int = 16, *, mlp_ratio: int = 2, per_direction: bool = False,
                 expand: int = 1, chunk: int = 32, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.norm1 = TokenLayerNorm(dim, dtype=dtype)
        self.ss2d = SS2D(dim, d_state, per_direction=per_direction, expand=expand, chunk=chunk, rng=rng, dtype=dtype)
        self.norm2 = TokenLayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng=rng, dtype=dtype)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng=rng, dtype=dtype)

    def forward_tokens(self, tokens: Tensor, spatial) -> Tensor:
        if tokens.shape[-1] != self.dim:
            raise DimensionError(f"vision Mamba layer expects width {self.dim}, got {tokens.shape[-1]}")
        z = self.ss2d.forward_tokens(self.norm1(tokens), spatial) + tokens
        return self.fc2(T.leaky_relu(self.fc1(self.norm2(z)))) + z

    def forward(self, z: Tensor) -> Tensor:
        return tokens_to_grid(self.forward_tokens(grid_to_tokens(z), z.shape[2:]), z.shape[2:])


class Bottleneck(Module):
    """Flatten the deepest encoder feature, apply ``n_blocks`` layers, re-grid."""

    def __init__(self, dim: int, n_blocks: int = 16, d_state: int = 16, **kwargs):
        self.layers = [VisionMambaLayer(dim, d_state, **kwargs) for _ in range(n_blocks)]

    def forward(self, f: Tensor) -> Tensor:
        if not self.layers:
            return f
        spatial = f.shape[2:]
        tokens = grid_to_tokens(f)
        for layer in self.layers:
            tokens = layer.forward_tokens(tokens, spatial)
        return tokens_to_grid(tokens, spatial)
