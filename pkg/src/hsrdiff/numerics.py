"""Dense tensors with tape-based reverse-mode differentiation.

Everything the denoiser needs is expressed with the ops below. Each op computes
its forward value with numpy and, when any input requires a gradient, records a
closure mapping the output gradient to input gradients. ``backward`` walks the
recorded graph in reverse topological order and accumulates into leaf ``grad``
arrays (additively, so call ``zero_grad`` between steps).
"""

from __future__ import annotations

import math
import threading
import zlib
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64
LN_EPS = 1e-5

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for tensor of rank {ndim}")
    return axis % ndim


# --- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _result(a.data / b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,))


def tabs(x: Tensor) -> Tensor:
    # np.sign gives the zero subgradient at exact ties
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)

    def bw(g):
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), bw)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))

    def bw(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _result(x.data * sig, (x,), bw)


# --- reductions -----------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, int):
        axis = _check_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, int):
        axis = _check_axis(axis, x.ndim)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / max(n, 1))


def tmax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, int):
        axis = _check_axis(axis, x.ndim)
    out = np.max(x.data, axis=axis, keepdims=True)
    mask = x.data == out
    mask = mask / mask.sum(axis=axis, keepdims=True)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (mask * g,)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return _result(np.asarray(value), (x,), bw)


# --- shape ----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    axis = _check_axis(axis, xs[0].ndim)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def split(x: Tensor, sections: int | Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = _check_axis(axis, x.ndim)
    n = x.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ValueError(f"cannot split axis of size {n} into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
    starts = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for lo, hi in zip(starts[:-1], starts[1:]):
        key = [slice(None)] * x.ndim
        key[axis] = slice(int(lo), int(hi))
        out.append(getitem(x, tuple(key)))
    return out


def getitem(x: Tensor, key) -> Tensor:
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int)) for k in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _result(np.array(x.data[key]), (x,), bw)


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    axis = _check_axis(axis, x.ndim)
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(np.take(x.data, index, axis=axis), (x,), bw)


def reflect_index(n: int, before: int, after: int) -> np.ndarray:
    """Source indices of a symmetric (edge-repeating) pad; works for pads wider than n."""
    return np.pad(np.arange(n), (before, after), mode="symmetric")


def pad_reflect(x: Tensor, pads: Sequence[tuple[int, int]]) -> Tensor:
    """Reflect-pad the trailing ``len(pads)`` axes."""
    out = x
    first = x.ndim - len(pads)
    for i, (lo, hi) in enumerate(pads):
        if lo or hi:
            out = take(out, reflect_index(out.shape[first + i], lo, hi), first + i)
    return out


# --- linear algebra -------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), bw)


def conv2d_3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1: [Ci,H,W] -> [Co,H,W]."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d_3x3 expects [C,H,W] input and [Co,Ci,3,3] kernel, got {x.shape}, {kernel.shape}")
    ci, h, w = x.shape
    co = kernel.shape[0]
    if kernel.shape[1] != ci:
        raise ValueError(f"conv2d_3x3 channel mismatch: input has {ci}, kernel expects {kernel.shape[1]}")
    if bias.shape != (co,):
        raise ValueError(f"conv2d_3x3 bias shape {bias.shape} != ({co},)")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))  # ci,h,w,3,3
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(ci * 9, h * w)
    k2 = kernel.data.reshape(co, ci * 9)
    out = (k2 @ cols + bias.data[:, None]).reshape(co, h, w)

    def bw(g):
        g2 = g.reshape(co, h * w)
        gk = (g2 @ cols.T).reshape(kernel.shape)
        gb = g2.sum(axis=1)
        gcols = (k2.T @ g2).reshape(ci, 3, 3, h, w)
        gxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                gxp[:, ky:ky + h, kx:kx + w] += gcols[:, ky, kx]
        return gxp[:, 1:-1, 1:-1], gk, gb

    return _result(out, (x, kernel, bias), bw)


# --- normalisation --------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, x.ndim)
    e = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw)


def _broadcast_param(p: Tensor, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = p.shape[0]
    return p.data.reshape(shape)


def layer_norm(x: Tensor, gain: Tensor | None, bias: Tensor | None, axis: int = -1) -> Tensor:
    """Normalise along ``axis`` (population variance, eps=1e-5), then per-feature affine."""
    axis = _check_axis(axis, x.ndim)
    n = x.shape[axis]
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + LN_EPS)
    xhat = xc * inv
    g_b = _broadcast_param(gain, x.ndim, axis) if gain is not None else None
    out = xhat * g_b if g_b is not None else xhat
    if bias is not None:
        out = out + _broadcast_param(bias, x.ndim, axis)
    other = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        dxhat = g * g_b if g_b is not None else g
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axis, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axis, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append((g * xhat).sum(axis=other))
        if bias is not None:
            grads.append(g.sum(axis=other))
        return tuple(grads)

    parents = [x] + [p for p in (gain, bias) if p is not None]
    return _result(out, parents, bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) along ``axis``; zero vectors stay zero."""
    axis = _check_axis(axis, x.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, eps, norm)
    out = x.data / denom

    def bw(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g / denom, (g - out * proj) / denom),)

    return _result(out, (x,), bw)


# --- windows --------------------------------------------------------------


def window_partition(x: Tensor, win: int) -> Tensor:
    """[C,H,W] -> [n_windows, C, win, win], reflect-padding H and W up to multiples of win.

    Windows are ordered row-major over the (padded) window grid.
    """
    if win < 1:
        raise ValueError(f"window size must be >= 1, got {win}")
    c, h, w = x.shape
    ph, pw = -h % win, -w % win
    xp = pad_reflect(x, [(0, ph), (0, pw)])
    nh, nw = (h + ph) // win, (w + pw) // win
    t = reshape(xp, (c, nh, win, nw, win))
    t = transpose(t, (1, 3, 0, 2, 4))
    return reshape(t, (nh * nw, c, win, win))


def window_merge(windows: Tensor, win: int, height: int, width: int) -> Tensor:
    """Inverse of ``window_partition``: reassemble and crop to ``height`` x ``width``."""
    if win < 1:
        raise ValueError(f"window size must be >= 1, got {win}")
    nh, nw = -(-height // win), -(-width // win)
    n, c = windows.shape[:2]
    if n != nh * nw:
        raise ValueError(f"expected {nh * nw} windows for {height}x{width}, got {n}")
    t = reshape(windows, (nh, nw, c, win, win))
    t = transpose(t, (2, 0, 3, 1, 4))
    t = reshape(t, (c, nh * win, nw * win))
    if nh * win == height and nw * win == width:
        return t
    return getitem(t, (slice(None), slice(0, height), slice(0, width)))


# --- backward -------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# --- randomness -----------------------------------------------------------


class Rng:
    """Seeded Philox (counter-based) stream; children are derived by name, never shared."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.key])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def spawn(self, name: str | int) -> "Rng":
        tag = name if isinstance(name, int) else zlib.crc32(str(name).encode())
        return Rng(self.seed, self.key + (int(tag),))

    def normal(self, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers on [low, high)."""
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5,
                       index: Iterable[tuple] | None = None) -> np.ndarray:
    """Central differences of the scalar ``f`` w.r.t. entries of ``x`` (mutated in place and restored)."""
    grad = np.zeros_like(x)
    positions = index if index is not None else np.ndindex(*x.shape)
    for pos in positions:
        orig = x[pos]
        x[pos] = orig + step
        fp = f()
        x[pos] = orig - step
        fm = f()
        x[pos] = orig
        grad[pos] = (fp - fm) / (2 * step)
    return grad
