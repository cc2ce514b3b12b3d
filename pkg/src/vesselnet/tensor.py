"""Dense n-d tensor with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` on its output. Calling
:meth:`Tensor.backward` on a scalar collects the reachable nodes into a
:class:`ComputationTape` (topologically ordered) and replays it in reverse.

Layout is row-major and channel-first: ``(N, C, *spatial)``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ComputationTape",
    "DimensionError",
    "NumericError",
    "ParameterError",
    "no_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "record",
]


class DimensionError(ValueError):
    """Incompatible shapes or axes."""


class NumericError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class ParameterError(ValueError):
    """Invalid hyperparameter (eps <= 0, non-positive timestep, ...)."""


_state = threading.local()
_DEFAULT_DTYPE = [np.float32]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE[0] = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Node:
    """One recorded op: its inputs and a closure mapping output grad to input grads."""

    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    consumed: bool = False


@dataclass
class ComputationTape:
    """Topologically ordered op nodes reachable from a root tensor."""

    order: list = field(default_factory=list)  # list[Tensor], inputs before outputs

    @classmethod
    def from_root(cls, root: "Tensor") -> "ComputationTape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.inputs:
                    if id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    @property
    def nodes(self) -> list[Node]:
        return [t._node for t in self.order if t._node is not None]


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")
    return arr


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        # 0-d arithmetic yields numpy scalars, which must keep their precision too
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
            return np.asarray(data)
        dtype = get_default_dtype()
    return np.asarray(data, dtype=dtype)


def record(op: str, data: np.ndarray, inputs: Sequence["Tensor"], backward) -> "Tensor":
    """Wrap ``data`` as the output of ``op``, recording a node when grads are needed.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    _check_finite(data, op)
    needs = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._node = Node(op, tuple(inputs), backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a} with {b}") from exc


class Tensor:
    """n-d value grid with optional gradient."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _as_array(data, dtype)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"extents must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        dtype = np.dtype(dtype)
        src = self.dtype
        return record("astype", self.data.astype(dtype), (self,), lambda g: (g.astype(src),))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable leaf with ``requires_grad``.

        A graph can be replayed once; a second call on the same graph raises.
        """
        if grad is None and self.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss is not connected to any tensor that requires grad")
        tape = ComputationTape.from_root(self)
        if any(n.consumed for n in tape.nodes):
            raise RuntimeError("backward already ran on this graph; rebuild the forward pass")

        grads = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad, self.dtype)}
        for t in reversed(tape.order):
            g = grads.pop(id(t), None)
            node = t._node
            if node is None:
                if t.requires_grad and g is not None:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            node.consumed = True
            if g is None:
                continue
            in_grads = node.backward(g)
            node.backward = None
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise DimensionError(f"{node.op}: grad shape {ig.shape} != input shape {inp.shape}")
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig

    # -- operator sugar ---------------------------------------------------
    def _wrap(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._wrap(other))

    def __rsub__(self, other):
        return sub(self._wrap(other), self)

    def __mul__(self, other):
        return mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._wrap(other))

    def __rtruediv__(self, other):
        return div(self._wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return record(
        "mul", ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    xd = x.data
    if p == 0.0:
        return record("pow", np.ones_like(xd), (x,), lambda g: (np.zeros_like(g),))
    return record("pow", xd ** p, (x,), lambda g: (g * p * xd ** (p - 1.0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NumericError("log of non-positive value")
    return record("log", np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = (0.5 * (1.0 + np.tanh(0.5 * xd))).astype(xd.dtype, copy=False)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0.0, xd).astype(xd.dtype, copy=False)
    sig = (0.5 * (1.0 + np.tanh(0.5 * xd))).astype(xd.dtype, copy=False)
    return record("softplus", out, (x,), lambda g: (g * sig,))


def silu(x: Tensor) -> Tensor:
    return mul(x, sigmoid(x))


def leaky_relu(x: Tensor, negative_slope: float = 0.01) -> Tensor:
    xd = x.data
    slope = np.where(xd > 0, 1.0, negative_slope).astype(xd.dtype)
    return record("leaky_relu", xd * slope, (x,), lambda g: (g * slope,))


# ---------------------------------------------------------------------------
# reductions and normalisation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple | None:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(out))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axes, keepdims) * (1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)
    return record("softmax", out, (x,), lambda g: (out * (g - (g * out).sum(axis=ax, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axes(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return record("log_softmax", out, (x,), lambda g: (g - sm * g.sum(axis=ax, keepdims=True),))


def layer_norm(x: Tensor, axes, eps: float = 1e-5) -> Tensor:
    """Normalise over ``axes`` to zero mean and unit variance (no affine)."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    axes = _norm_axes(axes, x.ndim)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return record("layer_norm", xhat, (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {shape}") from exc
    return record("reshape", out, (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return record("permute", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of nothing")
    (ax,) = _norm_axes(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return record("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


def getitem(x: Tensor, key) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return record("getitem", np.array(x.data[key]), (x,), backward)


def index_select(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; backward scatters with accumulation."""
    (ax,) = _norm_axes(axis, x.ndim)
    idx = np.asarray(indices, dtype=np.int64)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return record("index_select", np.take(x.data, idx, axis=ax), (x,), backward)


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise DimensionError(f"pad widths rank {len(widths)} != tensor rank {x.ndim}")
    key = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return record("pad", np.pad(x.data, widths), (x,), lambda g: (g[key],))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; ``weight`` is (out, in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise DimensionError(f"linear: bias shape {bias.shape} vs out width {wd.shape[0]}")
        out = out + bias.data
        inputs.append(bias)

    def backward(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return grads

    return record("linear", out, inputs, backward)


def max_pool(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k``-window max pooling over every spatial axis."""
    n, c, *sp = x.shape
    if any(s % k for s in sp):
        raise DimensionError(f"max_pool: spatial extents {sp} not divisible by {k}")
    nd = len(sp)
    split = [n, c]
    for s in sp:
        split += [s // k, k]
    w = x.data.reshape(split)
    outer = [2 + 2 * i for i in range(nd)]
    inner = [3 + 2 * i for i in range(nd)]
    w = w.transpose([0, 1] + outer + inner).reshape(n, c, *[s // k for s in sp], k ** nd)
    arg = w.argmax(axis=-1)
    out = np.take_along_axis(w, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        gw = np.zeros(w.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, *[s // k for s in sp], *([k] * nd))
        back = [0, 1]
        for i in range(nd):
            back += [2 + i, 2 + nd + i]
        return (gw.transpose(back).reshape(shape),)

    return record("max_pool", out, (x,), backward)

