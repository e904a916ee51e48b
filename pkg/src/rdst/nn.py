"""Layers shared by RDST and the U-Net, parameter storage and cost accounting."""

from __future__ import annotations

import contextlib
import io
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def kaiming_uniform_init(shape, fan_in: int, rng_seed=0, dtype=np.float32) -> Tensor:
    """Uniform(-b, b) with b = sqrt(6 / fan_in), the ReLU-gain Kaiming bound."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    bound = np.sqrt(6.0 / fan_in)
    data = _rng(rng_seed).uniform(-bound, bound, size=tuple(shape)).astype(dtype)
    return Tensor(data, requires_grad=True)


class ParamStore:
    """Ordered, named collection of trainable tensors."""

    def __init__(self, dtype=np.float32):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self.dtype = np.dtype(dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def add(self, name: str, value) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=self.dtype))
        t.requires_grad = True
        self._tensors[name] = t
        return t

    def num_params(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self._tensors.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def freeze(self) -> "ParamStore":
        for t in self._tensors.values():
            t.requires_grad = False
        return self

    def unfreeze(self) -> "ParamStore":
        for t in self._tensors.values():
            t.requires_grad = True
        return self

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for n, t in self._tensors.items():
            out.add(n, Tensor(t.data.astype(dtype)))
        return out

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data) for n, t in self._tensors.items())

    @classmethod
    def from_arrays(cls, arrays, dtype=None) -> "ParamStore":
        arrays = OrderedDict(arrays)
        if dtype is None:
            dtype = next(iter(arrays.values())).dtype if arrays else np.float32
        out = cls(dtype)
        for n, a in arrays.items():
            out.add(n, Tensor(np.array(a, dtype=dtype)))
        return out

    # -- builders -----------------------------------------------------------
    def conv(self, name: str, cin: int, cout: int, k: int, rng, zero: bool = False) -> None:
        w = kaiming_uniform_init((cout, cin, k, k), cin * k * k, rng, self.dtype)
        if zero:
            w.data[...] = 0
        self.add(f"{name}.weight", w)
        self.add(f"{name}.bias", np.zeros(cout, dtype=self.dtype))

    def linear(self, name: str, din: int, dout: int, rng) -> None:
        self.add(f"{name}.weight", kaiming_uniform_init((din, dout), din, rng, self.dtype))
        self.add(f"{name}.bias", np.zeros(dout, dtype=self.dtype))

    def norm(self, name: str, dim: int) -> None:
        self.add(f"{name}.weight", np.ones(dim, dtype=self.dtype))
        self.add(f"{name}.bias", np.zeros(dim, dtype=self.dtype))


# ---------------------------------------------------------------------------
# MAC tracing (counts what a real forward pass executes)
# ---------------------------------------------------------------------------

_TRACE: list | None = None


@contextlib.contextmanager
def trace_macs():
    """Collect ``(kind, macs)`` for every conv/linear/attention matmul executed."""
    global _TRACE
    old, _TRACE = _TRACE, []
    try:
        yield _TRACE
    finally:
        _TRACE = old


def record_macs(kind: str, macs: int) -> None:
    if _TRACE is not None:
        _TRACE.append((kind, int(macs)))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    out = T.conv2d(x, w, b, stride=stride, pad=pad)
    co, ci, k, _ = w.shape
    record_macs("conv", k * k * ci * co * out.shape[0] * out.shape[2] * out.shape[3])
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis with w[din, dout]."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    if x.ndim == 1:
        out = T.matmul(x.reshape(1, -1), w).reshape(-1)
    else:
        out = T.matmul(x, w)
    if b is not None:
        out = out + b
    record_macs("linear", w.shape[0] * w.shape[1] * (x.size // x.shape[-1]))
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, gamma, beta, eps)


def gelu(x: Tensor) -> Tensor:
    return T.gelu(x)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: output pixel (i*r+a, j*r+b) reads channel c*r*r + a*r + b."""
    N, C, H, W = x.shape
    if C % (r * r):
        raise ValueError(f"pixel_shuffle: {C} channels not divisible by r^2={r * r}")
    c = C // (r * r)
    y = x.reshape(N, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(N, c, H * r, W * r)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    N, c, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise ValueError("pixel_unshuffle: spatial extents not divisible by r")
    H, W = Hr // r, Wr // r
    y = x.reshape(N, c, H, r, W, r).transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(N, c * r * r, H, W)


def conv_layer(p: ParamStore, name: str, x: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    w = p[f"{name}.weight"]
    k = w.shape[-1]
    return conv2d(x, w, p[f"{name}.bias"], stride=stride, pad=k // 2 if pad is None else pad)


def linear_layer(p: ParamStore, name: str, x: Tensor) -> Tensor:
    return linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def norm_layer(p: ParamStore, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, p[f"{name}.weight"], p[f"{name}.bias"])


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


@dataclass
class CostEntry:
    name: str
    params: int = 0
    macs: int = 0


@dataclass
class CostReport:
    entries: list[CostEntry] = field(default_factory=list)
    input_shape: tuple = ()

    @property
    def params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def macs(self) -> int:
        return sum(e.macs for e in self.entries)

    def add(self, name: str, params: int = 0, macs: int = 0) -> None:
        self.entries.append(CostEntry(name, int(params), int(macs)))

    def extend(self, other: "CostReport", prefix: str = "") -> None:
        for e in other.entries:
            self.entries.append(CostEntry(prefix + e.name, e.params, e.macs))

    def grouped(self, depth: int = 2) -> "CostReport":
        """Merge entries whose names share the first ``depth`` dotted parts."""
        merged: "OrderedDict[str, CostEntry]" = OrderedDict()
        for e in self.entries:
            key = ".".join(e.name.split(".")[:depth])
            acc = merged.setdefault(key, CostEntry(key))
            acc.params += e.params
            acc.macs += e.macs
        return CostReport(list(merged.values()), self.input_shape)

    def to_table(self) -> str:
        width = max([len(e.name) for e in self.entries] + [5])
        lines = [f"{'layer':<{width}}  {'params':>12}  {'MACs':>16}"]
        for e in self.entries:
            lines.append(f"{e.name:<{width}}  {e.params:>12,d}  {e.macs:>16,d}")
        lines.append(f"{'total':<{width}}  {self.params:>12,d}  {self.macs:>16,d}")
        lines.append(f"params = {self.params / 1e6:.2f} M, MACs = {self.macs / 1e9:.2f} G"
                     f" at input {'x'.join(map(str, self.input_shape))}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("layer,params,macs\n")
        for e in self.entries:
            buf.write(f"{e.name},{e.params},{e.macs}\n")
        buf.write(f"total,{self.params},{self.macs}\n")
        return buf.getvalue()


def conv_cost(cin: int, cout: int, k: int, h_out: int, w_out: int, bias: bool = True) -> tuple[int, int]:
    return k * k * cin * cout + (cout if bias else 0), k * k * cin * cout * h_out * w_out


def linear_cost(din: int, dout: int, tokens: int, bias: bool = True) -> tuple[int, int]:
    return din * dout + (dout if bias else 0), din * dout * tokens
