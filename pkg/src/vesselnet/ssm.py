"""Selective state-space scan (S6).

Per channel ``d`` and state ``n`` the discretised recurrence is::

    a_t = exp(delta_t[d] * A[d, n])          (zero-order hold)
    u_t = delta_t[d] * B_t[n] * x_t[d]       (Euler input path)
    h_t = a_t * h_{t-1} + u_t
    y_t[d] = sum_n C_t[n] * h_t[d, n]

``scan_naive`` keeps every state; ``scan_chunked`` walks the same recurrence
but only retains the state at each chunk boundary, and its backward pass
recomputes one chunk at a time from those boundary states.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .io import write_tensor
from .nn import Linear, Module, param
from .tensor import DimensionError, ParameterError, Tensor, record

__all__ = [
    "SelectiveScanParams",
    "discretize",
    "scan_naive",
    "scan_chunked",
    "selective_scan",
    "S6Block",
    "dump_selective_params",
]


def discretize(A, B, delta):
    """Return ``(A_bar, B_bar) = (exp(delta * A), delta * B)`` for diagonal ``A``."""
    delta = np.asarray(delta, dtype=np.result_type(A, float))
    if np.any(delta <= 0):
        raise ParameterError("timestep delta must be > 0")
    return np.exp(delta * np.asarray(A)), delta * np.asarray(B)


@dataclass
class SelectiveScanParams:
    """One selective-scan evaluation.

    Shapes (leading batch axes optional and shared): ``x``, ``delta``: (..., L, D);
    ``A``: (D, N); ``B``, ``C``: (..., L, N); ``h0``: (..., D, N) or None.
    """

    x: np.ndarray
    delta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    h0: np.ndarray | None = None

    def validate(self) -> None:
        L, D = self.x.shape[-2:]
        N = self.A.shape[-1]
        if self.delta.shape != self.x.shape:
            raise DimensionError(f"delta shape {self.delta.shape} != x shape {self.x.shape}")
        if self.A.shape != (D, N):
            raise DimensionError(f"A shape {self.A.shape} != ({D}, {N})")
        lead = self.x.shape[:-2]
        for name, arr in (("B", self.B), ("C", self.C)):
            if arr.shape != lead + (L, N):
                raise DimensionError(f"{name} shape {arr.shape} != {lead + (L, N)}")
        if self.h0 is not None and self.h0.shape != lead + (D, N):
            raise DimensionError(f"h0 shape {self.h0.shape} != {lead + (D, N)}")
        if np.any(self.delta <= 0):
            raise ParameterError("all delta_t must be > 0")
        if np.any(self.A >= 0):
            raise ParameterError("A must be strictly negative (decaying memory)")

    @property
    def length(self) -> int:
        return self.x.shape[-2]


def _coeffs(delta, x, A, B):
    a = np.exp(delta[..., None] * A)
    u = (delta * x)[..., None] * B[..., None, :]
    return a, u


def _initial(p_x, A, h0):
    if h0 is not None:
        return h0
    return np.zeros(p_x.shape[:-2] + A.shape, dtype=p_x.dtype)


def scan_naive(params: SelectiveScanParams) -> np.ndarray:
    """Sequential reference: one step at a time, all states materialised."""
    params.validate()
    a, u = _coeffs(params.delta, params.x, params.A, params.B)
    h = _initial(params.x, params.A, params.h0)
    ys = []
    for t in range(params.length):
        h = a[..., t, :, :] * h + u[..., t, :, :]
        ys.append((h * params.C[..., t, None, :]).sum(-1))
    return np.stack(ys, axis=-2)


def _chunk_states(a, u, h):
    """Run the recurrence over one chunk; returns per-step states (..., T, D, N)."""
    hs = np.empty_like(u)
    for t in range(u.shape[-3]):
        h = a[..., t, :, :] * h + u[..., t, :, :]
        hs[..., t, :, :] = h
    return hs


def _forward(x, delta, A, B, C, h0, chunk):
    L = x.shape[-2]
    h = _initial(x, A, h0)
    y = np.empty_like(x)
    boundaries = []
    for s in range(0, L, chunk):
        e = min(s + chunk, L)
        boundaries.append(h)
        a, u = _coeffs(delta[..., s:e, :], x[..., s:e, :], A, B[..., s:e, :])
        hs = _chunk_states(a, u, h)
        y[..., s:e, :] = (hs * C[..., s:e, None, :]).sum(-1)
        h = hs[..., -1, :, :]
    return y, boundaries


def scan_chunked(params: SelectiveScanParams, chunk: int) -> np.ndarray:
    """Same recurrence as :func:`scan_naive`; keeps O(L / chunk) states."""
    if chunk < 1:
        raise ParameterError(f"chunk must be >= 1, got {chunk}")
    params.validate()
    y, _ = _forward(params.x, params.delta, params.A, params.B, params.C, params.h0, chunk)
    return y


def _backward(gy, x, delta, A, B, C, h0, chunk, boundaries):
    L = x.shape[-2]
    gx, gdelta = np.zeros_like(x), np.zeros_like(delta)
    gB, gC = np.zeros_like(B), np.zeros_like(C)
    gA = np.zeros_like(A)
    carry = np.zeros(x.shape[:-2] + A.shape, dtype=x.dtype)  # dL/dh at the chunk's last step, from the future
    starts = list(range(0, L, chunk))
    batch_axes = tuple(range(x.ndim - 1))
    for ci in reversed(range(len(starts))):
        s = starts[ci]
        e = min(s + chunk, L)
        xs, ds, Bs, Cs, gys = x[..., s:e, :], delta[..., s:e, :], B[..., s:e, :], C[..., s:e, :], gy[..., s:e, :]
        a, u = _coeffs(ds, xs, A, Bs)
        h_in = boundaries[ci]
        hs = _chunk_states(a, u, h_in)
        gh = np.empty_like(hs)
        g = carry
        for t in reversed(range(e - s)):
            g = gys[..., t, :, None] * Cs[..., t, None, :] + g
            gh[..., t, :, :] = g
            g = a[..., t, :, :] * g
        carry = g
        h_prev = np.concatenate([h_in[..., None, :, :], hs[..., :-1, :, :]], axis=-3)
        gC[..., s:e, :] = (gys[..., :, :, None] * hs).sum(-2)
        g_dx = (gh * Bs[..., None, :]).sum(-1)  # grad wrt delta*x
        gdelta[..., s:e, :] += g_dx * xs
        gx[..., s:e, :] = g_dx * ds
        gB[..., s:e, :] = (gh * (ds * xs)[..., None]).sum(-2)
        gz = gh * h_prev * a  # grad wrt delta*A
        gdelta[..., s:e, :] += (gz * A).sum(-1)
        gA += (gz * ds[..., None]).sum(axis=batch_axes)
    gh0 = carry if h0 is not None else None
    return gx, gdelta, gA, gB, gC, gh0


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   h0: Tensor | None = None, chunk: int = 32) -> Tensor:
    """Differentiable chunked selective scan (see module docstring for shapes)."""
    if chunk < 1:
        raise ParameterError(f"chunk must be >= 1, got {chunk}")
    p = SelectiveScanParams(x.data, delta.data, A.data, B.data, C.data, None if h0 is None else h0.data)
    p.validate()
    y, boundaries = _forward(p.x, p.delta, p.A, p.B, p.C, p.h0, chunk)
    inputs = [x, delta, A, B, C] + ([h0] if h0 is not None else [])

    def backward(gy):
        grads = _backward(gy, p.x, p.delta, p.A, p.B, p.C, p.h0, chunk, boundaries)
        return grads[:5] + ((grads[5],) if h0 is not None else ())

    return record("selective_scan", y, inputs, backward)


def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


class S6Block(Module):
    """Token mixer: input-dependent delta/B/C, selective scan, SiLU gate.

    ``tokens`` are (batch, L, d_model). No residual inside; callers add it.
    """

    def __init__(self, d_model: int, d_state: int = 16, *, expand: int = 1, chunk: int = 32,
                 dt_min: float = 1e-3, dt_max: float = 0.1, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        d_inner = expand * d_model
        self.d_model, self.d_state, self.d_inner, self.chunk = d_model, d_state, d_inner, chunk
        self.in_proj = Linear(d_model, d_inner, bias=False, rng=rng, dtype=dtype)
        self.gate_proj = Linear(d_model, d_inner, bias=False, rng=rng, dtype=dtype)
        self.dt_proj = Linear(d_inner, d_inner, rng=rng, dtype=dtype, std=0.1 / np.sqrt(d_inner))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), d_inner))
        self.dt_proj.bias = param(_inv_softplus(dt), dtype)
        self.B_proj = Linear(d_inner, d_state, rng=rng, dtype=dtype)
        self.C_proj = Linear(d_inner, d_state, rng=rng, dtype=dtype)
        # A = -exp(A_log) keeps every diagonal entry strictly negative; starts at -(n + 1)
        self.A_log = param(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))), dtype)
        self.out_proj = Linear(d_inner, d_model, bias=False, rng=rng, dtype=dtype)

    def A(self) -> Tensor:
        return -T.exp(self.A_log)

    def _projections(self, tokens: Tensor):
        if tokens.shape[-1] != self.d_model:
            raise DimensionError(f"S6 block expects width {self.d_model}, got {tokens.shape[-1]}")
        x = self.in_proj(tokens)
        delta = T.softplus(self.dt_proj(x))
        return x, delta, self.B_proj(x), self.C_proj(x)

    def forward(self, tokens: Tensor) -> Tensor:
        x, delta, B, C = self._projections(tokens)
        y = selective_scan(x, delta, self.A(), B, C, chunk=self.chunk)
        return self.out_proj(y * T.silu(self.gate_proj(tokens)))

    def selective_params(self, tokens: Tensor) -> dict[str, np.ndarray]:
        with T.no_grad():
            _, delta, B, C = self._projections(tokens)
        return {"delta": delta.data, "B": B.data, "C": C.data}


def dump_selective_params(block: S6Block, grid: Tensor, out_dir) -> dict[str, np.ndarray]:
    """Write per-location delta (channel mean), |B| and |C| maps for a feature grid.

    ``grid`` is (batch, channels, *spatial); tokens are taken in row-major order
    and the maps come back with shape (batch, *spatial).
    """
    b, c, *spatial = grid.shape
    tokens = grid.reshape(b, c, -1).permute(0, 2, 1)
    sel = block.selective_params(tokens)
    maps = {
        "delta": sel["delta"].mean(-1).reshape(b, *spatial),
        "b_norm": np.linalg.norm(sel["B"], axis=-1).reshape(b, *spatial),
        "c_norm": np.linalg.norm(sel["C"], axis=-1).reshape(b, *spatial),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in maps.items():
        write_tensor(out_dir / f"{name}.mvnt", np.ascontiguousarray(arr))
    return maps
