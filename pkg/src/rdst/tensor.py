"""Dense tensors with a dynamic reverse-mode autodiff tape.

Every differentiable op builds its output through :func:`_make`, which stores
the parent tensors and a closure mapping the output gradient to one gradient
per parent.  :func:`backward` sorts the recorded graph topologically and runs
the closures in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_DEBUG = True
_GRAD_ENABLED = True


def set_debug(flag: bool) -> None:
    """Toggle the non-finite check run after every op (off for benchmarking)."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


@contextlib.contextmanager
def debug_mode(flag: bool):
    old = _DEBUG
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(old)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("parents", "backward_fn", "consumed", "name")

    def __init__(self, parents, backward_fn, name):
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False
        self.name = name


class Tensor:
    """A dense row-major array, optionally participating in the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> "Tape":
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {name}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(tuple(parents), backward_fn, name)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of trailing-dimension broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ValueError(f"shapes {a} and {b} are not broadcast-compatible") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def elementwise(kind: str, a, b) -> Tensor:
    """Binary elementwise op by name: ``add``, ``sub``, ``mul`` or ``div``."""
    fn = {"add": add, "sub": sub, "mul": mul, "div": div}.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return fn(a, b)


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out.astype(a.dtype, copy=False), (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    ad = a.data
    out = np.clip(ad, lo, hi)
    inside = np.ones(ad.shape, dtype=bool)
    if lo is not None:
        inside &= ad >= lo
    if hi is not None:
        inside &= ad <= hi
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


def _erf(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf

    return erf(x)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    out = (x * cdf).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),), "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    out = np.ascontiguousarray(a.data[idx])

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(out, (a,), bw, "getitem")


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            grads.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(grads)

    return _make(out, tensors, bw, "concat")


def pad(a: Tensor, widths: Sequence[tuple[int, int]], mode: str = "reflect") -> Tensor:
    """Pad each axis by ``widths[axis] = (before, after)`` ("reflect" or "constant")."""
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise ValueError("pad needs one (before, after) pair per axis")
    if not any(lo or hi for lo, hi in widths):
        return a
    out = np.pad(a.data, widths, mode=mode)
    shape = a.shape
    if mode == "constant":
        sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, shape))
        return _make(out, (a,), lambda g: (np.ascontiguousarray(g[sl]),), "pad")
    maps = [np.pad(np.arange(n), w, mode=mode) if (w[0] or w[1]) else None
            for n, w in zip(shape, widths)]

    def bw(g):
        for axis, index in enumerate(maps):
            if index is None:
                continue
            dst_shape = list(g.shape)
            dst_shape[axis] = shape[axis]
            dst = np.zeros(dst_shape, dtype=g.dtype)
            _scatter_axis(dst, g, index, axis)
            g = dst
        return (g,)

    return _make(out, (a,), bw, "pad")


def pad2d(a: Tensor, pads: tuple[int, int, int, int], mode: str = "reflect") -> Tensor:
    """Pad the last two axes by (top, bottom, left, right)."""
    top, bottom, left, right = pads
    return pad(a, [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)], mode)


def _scatter_axis(dst: np.ndarray, src: np.ndarray, index: np.ndarray, axis: int) -> None:
    """dst[..., index[k], ...] += src[..., k, ...] along ``axis``."""
    axis = axis % src.ndim
    for k, i in enumerate(index):
        sl_dst = [slice(None)] * src.ndim
        sl_src = [slice(None)] * src.ndim
        sl_dst[axis] = i
        sl_src[axis] = k
        dst[tuple(sl_dst)] += src[tuple(sl_src)]


def roll(a: Tensor, shifts: tuple[int, ...], axes: tuple[int, ...]) -> Tensor:
    out = np.roll(a.data, shifts, axes)
    back = tuple(-s for s in shifts)
    return _make(out, (a,), lambda g: (np.roll(g, back, axes),), "roll")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``table[index]`` along axis 0 (scatter-add on the way back)."""
    shape = table.shape
    out = table.data[index]

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return _make(out, (table,), bw, "take_rows")


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    out = a.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    H, W = a.shape[-2:]

    def bw(g):
        g = g.reshape(g.shape[:-2] + (H, factor, W, factor))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (a,), bw, "upsample_nearest")


# ---------------------------------------------------------------------------
# matmul and fused kernels
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _make(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine (gamma, beta)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd, bd = gamma.data, beta.data
    out = xhat * gd + bd
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return dx.astype(xd.dtype, copy=False), dgamma, dbeta

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """[N,C,Hp,Wp] -> [N, C*k*k, Ho*Wo] (x already padded)."""
    N, C, Hp, Wp = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # N,C,Ho,Wo,k,k
    Ho, Wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(N, C * k * k, Ho * Wo)
    return cols, Ho, Wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with w[C',C,k,k] (zero padding)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d expects x[N,C,H,W] and w[C',C,k,k]")
    N, C, H, W = xd.shape
    Co, Ci, k, k2 = wd.shape
    if Ci != C:
        raise ValueError(f"conv2d channel mismatch: input has {C}, weight expects {Ci}")
    if k != k2:
        raise ValueError("conv2d needs a square kernel")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ValueError("conv2d kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols, Ho, Wo = _im2col(xp, k, stride)
    wmat = wd.reshape(Co, C * k * k)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data.reshape(1, Co, 1)
    out = out.reshape(N, Co, Ho, Wo)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gm = g.reshape(N, Co, Ho * Wo)
        gw = np.einsum("nop,nqp->oq", gm, cols, optimize=True).reshape(wd.shape)
        dcols = np.matmul(wmat.T, gm).reshape(N, C, k, k, Ho, Wo)
        dxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        grads = (np.ascontiguousarray(dx), gw)
        if b is not None:
            grads += (gm.sum(axis=(0, 2)),)
        return grads

    return _make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)


def build_tape(root: Tensor) -> Tape:
    order: list[Tensor] = []
    leaves: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is None:
            if t.requires_grad:
                leaves.append(t)
            continue
        stack.append((t, True))
        for p in t.node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return Tape(nodes=order, leaves=leaves)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward called on a tensor that is not on the tape")
    if loss.node is not None and loss.node.consumed:
        raise TapeError("backward already ran on this graph; rebuild it with a new forward pass")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        node = t.node
        node.consumed = True
        if g is None:
            continue
        pgrads = node.backward_fn(g)
        node.backward_fn = None
        for p, pg in zip(node.parents, pgrads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.dtype)
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return tape
