"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays. Every differentiable operation records
its inputs and a backward closure on the output tensor; ``backward`` replays
those closures in reverse topological order. 64-bit scalars are the default
(reference mode for gradient checks); 32-bit is an opt-in benchmark mode via
``set_precision``/``precision``.

Broadcasting is deliberately restricted to bias-add over the leading axes;
everything else requires exact shape agreement.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "set_precision",
    "get_precision",
    "default_dtype",
    "precision",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "shift",
    "matmul",
    "transpose",
    "swapaxes",
    "reshape",
    "concat",
    "tsum",
    "tmean",
    "sigmoid",
    "gelu",
    "tabs",
    "tlog",
    "tsqrt",
    "tmaximum",
    "tminimum",
    "clamp",
    "softmax",
    "layer_norm",
    "conv2d",
    "finite_diff_check",
    "sampled_grad_check",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class _State(threading.local):
    def __init__(self):
        self.dtype = np.float64
        self.grad = True


_state = _State()


def set_precision(mode: str) -> None:
    """Select the scalar width for newly created tensors: 'f32' or 'f64'."""
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected 'f32' or 'f64'")
    _state.dtype = _DTYPES[mode]


def get_precision() -> str:
    return "f32" if _state.dtype == np.float32 else "f64"


def default_dtype():
    return _state.dtype


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the default scalar width."""
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    old = _state.grad
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


def grad_enabled() -> bool:
    return _state.grad


class Tensor:
    """A dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or _state.dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # thin operator sugar over the module-level ops
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__
    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)


def _result(data: np.ndarray, parents: Sequence[Tensor], bw: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state.grad and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also supports bias-add of a 1-D vector over leading axes."""
    bias_add = b.data.ndim == 1 and a.data.ndim > 1 and a.data.shape[-1] == b.data.shape[0]
    if not bias_add:
        _same_shape(a, b, "add")
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            if bias_add:
                b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
            else:
                b._accumulate(g)

    return _result(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _result(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * a.data / (b.data * b.data))

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(-g)

    return _result(-a.data, (a,), bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (no gradient for the constant)."""
    def bw(g):
        a._accumulate(g * c)

    return _result(a.data * a.data.dtype.type(c), (a,), bw)


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python scalar constant."""
    def bw(g):
        a._accumulate(g)

    return _result(a.data + a.data.dtype.type(c), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched product of 3-D operands."""
    ad, bd = a.data, b.data
    ok = (ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[0]) or (
        ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] == bd.shape[0] and ad.shape[2] == bd.shape[1]
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = ad @ bd

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ bd.swapaxes(-1, -2))
        if b.requires_grad:
            b._accumulate(ad.swapaxes(-1, -2) @ g)

    return _result(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    return swapaxes(a, -1, -2)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.ascontiguousarray(a.data.swapaxes(ax1, ax2))

    def bw(g):
        a._accumulate(g.swapaxes(ax1, ax2))

    return _result(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.data.shape))

    return _result(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _result(out, tuple(tensors), bw)


def _getitem(a: Tensor, key) -> Tensor:
    out = np.ascontiguousarray(a.data[key])

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] += g
        a._accumulate(full)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and nonlinearities


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            a._accumulate(np.full_like(a.data, g))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _result(np.asarray(out), (a,), bw)


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        a._accumulate(g * out * (1.0 - out))

    return _result(out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)  # x**3 hits a slow pow path
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))

    return _result(out, (a,), bw)


def tabs(a: Tensor) -> Tensor:
    """|x| with subgradient 0 at the kink."""
    def bw(g):
        a._accumulate(g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), bw)


def tlog(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), bw)


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        a._accumulate(g * 0.5 / out)

    return _result(out, (a,), bw)


def tmaximum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "maximum")
    take_a = a.data >= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * take_a)
        if b.requires_grad:
            b._accumulate(g * ~take_a)

    return _result(np.maximum(a.data, b.data), (a, b), bw)


def tminimum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "minimum")
    take_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * take_a)
        if b.requires_grad:
            b._accumulate(g * ~take_a)

    return _result(np.minimum(a.data, b.data), (a, b), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through strictly inside, 0 outside."""
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        a._accumulate(g * inside)

    return _result(np.clip(a.data, lo, hi), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilized by max-subtraction."""
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _result(out, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of an N x D matrix to mean 0 / variance 1, then affine."""
    x = a.data
    if x.ndim != 2 or gain.data.shape != (x.shape[1],) or bias.data.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: expected (N,D) input with (D,) gain/bias, got {x.shape}, "
            f"{gain.data.shape}, {bias.data.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            a._accumulate(inv * (gx - m1 - xhat * m2))

    return _result(out, (a, gain, bias), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 1) -> Tensor:
    """2-D convolution of a single (C,H,W) feature map, stride 1.

    Implemented as im2col + matrix product, so the heavy lifting stays in BLAS.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 4 or wd.shape[1] != xd.shape[0]:
        raise ShapeError(f"conv2d: expected (C,H,W) x and (F,C,kh,kw) w, got {xd.shape}, {wd.shape}")
    fo, ci, kh, kw = wd.shape
    if b.data.shape != (fo,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} != ({fo},)")
    _, h, wdt = xd.shape
    pad = np.pad(xd, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (kh, kw), axis=(1, 2))
    oh, ow = h + 2 * padding - kh + 1, wdt + 2 * padding - kw + 1
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(ci * kh * kw, oh * ow)
    wmat = wd.reshape(fo, ci * kh * kw)
    out = (wmat @ cols + b.data[:, None]).reshape(fo, oh, ow)

    def bw(g):
        gm = g.reshape(fo, oh * ow)
        if b.requires_grad:
            b._accumulate(gm.sum(axis=1))
        if w.requires_grad:
            w._accumulate((gm @ cols.T).reshape(wd.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(ci, kh, kw, oh, ow)
            dpad = np.zeros_like(pad)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, i : i + oh, j : j + ow] += dcols[:, i, j]
            if padding:
                dpad = dpad[:, padding:-padding, padding:-padding]
            x._accumulate(dpad)

    return _result(out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor with ``requires_grad``.

    Visits each graph node exactly once, in reverse topological order.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps the leaf ``x`` to a scalar; every coordinate of ``x`` is probed.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    x.requires_grad = True
    x.zero_grad()
    backward(f(x))
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst


def sampled_grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    coords: Sequence[tuple[int, int]],
    h: float = 1e-5,
) -> float:
    """Finite-difference check over sampled (parameter, flat index) coordinates.

    ``f`` is a closure over ``params`` returning a scalar loss; ``coords`` pairs
    an index into ``params`` with a flat coordinate of that parameter.
    """
    plist = list(params)
    for p in plist:
        p.zero_grad()
    backward(f())
    worst = 0.0
    with no_grad():
        for pi, ci in coords:
            p = plist[pi]
            analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[ci])
            flat = p.data.reshape(-1)
            orig = flat[ci]
            flat[ci] = orig + h
            fp = float(f().data)
            flat[ci] = orig - h
            fm = float(f().data)
            flat[ci] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(analytic - fd) / max(1.0, abs(analytic))
            worst = max(worst, err)
    return worst
