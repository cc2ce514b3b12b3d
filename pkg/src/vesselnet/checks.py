"""Finite-difference gradient checks and the scan complexity benchmark.

Gradient checks compare an analytic gradient against a central finite
difference taken in float64. For float32 the analytic side runs in float32 and
only the reference is float64, since an f32 finite difference is dominated by
rounding. The error measure is norm-wise relative error over sampled
coordinates, ``|g - g_fd| / max(|g_fd|, floor)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conv import conv, transposed_conv
from .losses import bce, cross_entropy, dice_loss, focal, msge, mse
from .model import ModelConfig, SegModel
from .ssm import SelectiveScanParams, scan_chunked, selective_scan
from .tensor import Tensor

TOLERANCE = {"float32": 1e-3, "float64": 1e-6}


@dataclass
class GradRow:
    name: str
    dtype: str
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.rel_err < self.tol)


def _rel(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def check_function(fn, inputs: list[np.ndarray], dtype: str = "float64", *, h: float = 1e-6,
                   max_coords: int = 24, seed: int = 0) -> float:
    """Largest relative error over the inputs of a scalar function ``fn(*tensors) -> Tensor``.

    ``fn`` is projected onto a fixed random cotangent when it returns a
    non-scalar, so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    probe = {}

    def scalar(tensors):
        out = fn(*tensors)
        if out.size == 1:
            return out.sum()
        if "w" not in probe:
            probe["w"] = rng.normal(size=out.shape)
        return (out * Tensor(probe["w"].astype(out.dtype))).sum()

    leaves = [Tensor(np.asarray(x, dtype=dtype), requires_grad=True) for x in inputs]
    scalar(leaves).backward()
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    base = [np.asarray(x, dtype=np.float64) for x in inputs]

    def f64(arrs):
        with T.no_grad():
            return scalar([Tensor(a) for a in arrs]).item()

    worst = 0.0
    for k, x in enumerate(base):
        flat = np.arange(x.size)
        coords = flat if x.size <= max_coords else rng.choice(flat, max_coords, replace=False)
        ga, gn = [], []
        for c in coords:
            idx = np.unravel_index(c, x.shape)
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[k][idx] += h
            minus[k][idx] -= h
            gn.append((f64(plus) - f64(minus)) / (2 * h))
            ga.append(float(analytic[k][idx]))
        worst = max(worst, _rel(np.array(ga), np.array(gn)))
    return worst


def op_cases(rng) -> dict:
    """Differentiable ops with small random inputs; shared by the CLI and the test suite."""
    n = lambda *s: rng.normal(size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    labels = rng.integers(0, 3, size=(2, 4, 4))
    probs_t = np.moveaxis(np.eye(3)[labels], -1, 1)
    hv_t = rng.uniform(-1, 1, size=(2, 2, 5, 5))
    nuc = rng.integers(0, 2, size=(2, 5, 5))
    return {
        "add": (lambda a, b: a + b, [n(3, 4), n(4)]),
        "sub": (lambda a, b: a - b, [n(3, 4), n(3, 1)]),
        "mul": (lambda a, b: a * b, [n(3, 4), n(1, 4)]),
        "div": (lambda a, b: a / b, [n(3, 4), pos(3, 4)]),
        "power": (lambda a: T.power(a, 3.0), [n(3, 4)]),
        "exp": (T.exp, [n(3, 4)]),
        "log": (T.log, [pos(3, 4)]),
        "sigmoid": (T.sigmoid, [n(3, 4)]),
        "tanh": (T.tanh, [n(3, 4)]),
        "softplus": (T.softplus, [n(3, 4)]),
        "silu": (T.silu, [n(3, 4)]),
        "leaky_relu": (T.leaky_relu, [n(3, 4)]),
        "sum": (lambda a: a.sum(axis=1), [n(3, 4)]),
        "mean": (lambda a: a.mean(axis=0), [n(3, 4)]),
        "softmax": (lambda a: T.softmax(a, axis=1), [n(2, 3, 4)]),
        "log_softmax": (lambda a: T.log_softmax(a, axis=1), [n(2, 3, 4)]),
        "layer_norm": (lambda a: T.layer_norm(a, axes=(1, 2)), [n(2, 3, 4)]),
        "reshape_permute": (lambda a: a.reshape(4, 6).permute(1, 0), [n(2, 3, 4)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [n(2, 3), n(2, 2)]),
        "stack": (lambda a, b: T.stack([a, b], axis=0), [n(2, 3), n(2, 3)]),
        "getitem": (lambda a: a[:, 1:3], [n(3, 4)]),
        "index_select": (lambda a: T.index_select(a, np.array([2, 0, 2, 1]), 1), [n(2, 3)]),
        "pad": (lambda a: T.pad(a, [(1, 0), (0, 2)]), [n(2, 3)]),
        "linear": (lambda x, w, b: T.linear(x, w, b), [n(2, 5, 3), n(4, 3), n(4)]),
        "max_pool": (lambda a: T.max_pool(a, 2), [n(1, 2, 4, 4)]),
        "conv2d": (lambda x, w, b: conv(x, w, b, stride=1, padding=1), [n(2, 2, 5, 5), n(3, 2, 3, 3), n(3)]),
        "conv2d_stride2": (lambda x, w: conv(x, w, None, stride=2, padding=0), [n(1, 2, 4, 4), n(3, 2, 2, 2)]),
        "conv3d": (lambda x, w, b: conv(x, w, b, stride=1, padding=1), [n(1, 2, 3, 4, 3), n(2, 2, 3, 3, 3), n(2)]),
        "transposed_conv2d": (lambda x, w, b: transposed_conv(x, w, b, stride=2), [n(2, 3, 3, 3), n(3, 2, 2, 2), n(2)]),
        "transposed_conv3d": (lambda x, w: transposed_conv(x, w, None, stride=2), [n(1, 2, 2, 2, 2), n(2, 2, 2, 2, 2)]),
        "selective_scan": (
            lambda x, d, a, b, c: selective_scan(x, d, a, b, c, chunk=3),
            [n(2, 7, 3), pos(2, 7, 3) * 0.3, -pos(3, 4), n(2, 7, 4), n(2, 7, 4)],
        ),
        "dice_loss": (lambda p: dice_loss(T.softmax(p, axis=1), probs_t), [n(2, 3, 4, 4)]),
        "cross_entropy": (lambda z: cross_entropy(z, labels), [n(2, 3, 4, 4)]),
        "focal": (lambda z: focal(z, labels, 2.0), [n(2, 3, 4, 4)]),
        "bce": (lambda z: bce(z, probs_t), [n(2, 3, 4, 4)]),
        "mse": (lambda z: mse(z, hv_t), [n(2, 2, 5, 5)]),
        "msge": (lambda z: msge(z, hv_t, nuc), [n(2, 2, 5, 5)]),
    }


def gradcheck_ops(dtypes=("float32", "float64"), seed: int = 0) -> list[GradRow]:
    rows = []
    for dtype in dtypes:
        for name, (fn, inputs) in op_cases(np.random.default_rng(seed)).items():
            rows.append(GradRow(name, dtype, check_function(fn, inputs, dtype, seed=seed), TOLERANCE[dtype]))
    return rows


def small_model_config(dtype: str = "float64", **kw) -> ModelConfig:
    base = dict(depth=2, base_width=4, n_blocks=1, d_state=4, dtype=dtype, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def gradcheck_model(dtype: str = "float64", size: int = 16, *, coords_per_param: int = 3, seed: int = 0,
                    h: float = 1e-6, config: ModelConfig | None = None) -> GradRow:
    """Analytic parameter gradient of the full model vs. a float64 central difference.

    A sample of coordinates from every parameter tensor is concatenated and
    compared norm-wise; the loss is the semantic Dice + CE objective.
    """
    from .losses import semantic_loss

    cfg = config or small_model_config(dtype)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, cfg.in_channels) + (size,) * cfg.dims)
    y = rng.integers(0, cfg.num_classes, size=(1,) + (size,) * cfg.dims)

    model = SegModel(cfg)
    ref = SegModel(ModelConfig(**{**cfg.to_dict(), "dtype": "float64"}))
    for (_, p), (_, q) in zip(model.named_parameters(), ref.named_parameters()):
        q.data = p.data.astype(np.float64)

    loss, _ = semantic_loss(model(Tensor(x.astype(cfg.dtype))), y)
    loss.backward()

    def f(m):
        with T.no_grad():
            return semantic_loss(m(Tensor(x)), y)[0].item()

    ga, gn = [], []
    for (name, p), (_, q) in zip(model.named_parameters(), ref.named_parameters()):
        picks = rng.choice(p.size, min(coords_per_param, p.size), replace=False)
        for c in picks:
            idx = np.unravel_index(c, p.shape)
            orig = q.data[idx]
            q.data[idx] = orig + h
            fp = f(ref)
            q.data[idx] = orig - h
            fm = f(ref)
            q.data[idx] = orig
            gn.append((fp - fm) / (2 * h))
            ga.append(float(p.grad[idx]))
    return GradRow("seg_model", cfg.dtype, _rel(np.array(ga), np.array(gn)), TOLERANCE[cfg.dtype])


def format_table(rows: list[GradRow]) -> str:
    lines = [f"{'check':<22} {'dtype':<8} {'rel_err':>11} {'tol':>8}  result"]
    for r in rows:
        lines.append(f"{r.name:<22} {r.dtype:<8} {r.rel_err:11.3e} {r.tol:8.0e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)


# -- complexity benchmark ----------------------------------------------------

def attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray, block: int = 1024) -> np.ndarray:
    """Dense softmax attention, processed in query blocks to bound memory."""
    out = np.empty_like(v)
    scale = 1.0 / math.sqrt(q.shape[-1])
    for s in range(0, q.shape[0], block):
        scores = (q[s:s + block] @ k.T) * scale
        scores -= scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        out[s:s + block] = (w @ v) / w.sum(axis=1, keepdims=True)
    return out


def _best_time(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def fit_exponent(lengths, times) -> float:
    """Slope of log(time) against log(L)."""
    return float(np.polyfit(np.log(lengths), np.log(times), 1)[0])


@dataclass
class BenchResult:
    scan: list  # (L, seconds)
    attention: list  # (L, seconds)
    scan_exponent: float
    attention_exponent: float

    def to_text(self) -> str:
        lines = ["kind L seconds"]
        lines += [f"scan {L} {t:.6f}" for L, t in self.scan]
        lines += [f"attention {L} {t:.6f}" for L, t in self.attention]
        lines.append(f"exponent scan={self.scan_exponent:.4f} attention={self.attention_exponent:.4f}")
        return "\n".join(lines) + "\n"

    def passed(self, lo: float = 0.9, hi: float = 1.15, quad: float = 1.8) -> bool:
        return lo <= self.scan_exponent <= hi and self.attention_exponent >= quad


def bench_scan(lengths=tuple(2 ** p for p in range(10, 17)), attention_lengths=tuple(2 ** p for p in range(10, 14)),
               d: int = 4, n: int = 4, chunk: int = 64, repeats: int = 3, seed: int = 0) -> BenchResult:
    rng = np.random.default_rng(seed)
    A = -rng.uniform(0.5, 2.0, size=(d, n))
    scan_rows = []
    for L in lengths:
        p = SelectiveScanParams(rng.normal(size=(L, d)), rng.uniform(0.01, 0.1, size=(L, d)), A,
                                rng.normal(size=(L, n)), rng.normal(size=(L, n)))
        scan_rows.append((L, _best_time(lambda: scan_chunked(p, chunk), repeats)))
    attn_rows = []
    for L in attention_lengths:
        q, k, v = (rng.normal(size=(L, d)) for _ in range(3))
        attn_rows.append((L, _best_time(lambda: attention_reference(q, k, v), repeats)))
    return BenchResult(scan_rows, attn_rows, fit_exponent(*zip(*scan_rows)), fit_exponent(*zip(*attn_rows)))
