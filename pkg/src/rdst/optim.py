"""Adam with bias correction, state kept as plain arrays so it can be checkpointed."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .nn import ParamStore


@dataclass
class AdamState:
    t: int = 0
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        out["t"] = np.array([self.t], dtype=np.float64)
        for n, a in self.m.items():
            out[f"m.{n}"] = a
        for n, a in self.v.items():
            out[f"v.{n}"] = a
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "AdamState":
        st = cls(t=int(arrays["t"][0]))
        for key, a in arrays.items():
            if key.startswith("m."):
                st.m[key[2:]] = np.array(a)
            elif key.startswith("v."):
                st.v[key[2:]] = np.array(a)
        return st


def adam_step(params: ParamStore, lr: float, state: AdamState, grads=None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Advance every parameter by one Adam step; ``grads`` defaults to ``.grad``."""
    if grads is None:
        grads = {n: t.grad for n, t in params.items()}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data = (p.data - step.astype(p.dtype, copy=False))
    return state
