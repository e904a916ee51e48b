"""The Residual Dense Swin Transformer (RDST / RDST-E) and its checkpoints."""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .io import load_checkpoint, save_checkpoint
from .nn import (CostReport, ParamStore, conv_cost, conv_layer, linear_cost,
                 linear_layer, pixel_shuffle)
from .swin import StlConfig, WindowGrid, init_stl, stl_cost, stl_layer
from .tensor import Tensor

UPSAMPLERS = ("staged", "single", "direct")


@dataclass(frozen=True)
class RdstConfig:
    scale: int = 4
    width: int = 60
    growth: int = 30
    window: int = 8
    heads: int = 6
    stl_per_dstb: int = 2
    dstb_per_rdstb: int = 3
    n_rdstb: int = 8
    in_channels: int = 1
    out_channels: int = 1
    mlp_ratio: float = 2.0
    use_rel_pos_bias: bool = True
    use_gff: bool = False
    upsampler: str = "staged"

    def __post_init__(self):
        if self.scale not in (1, 2, 3, 4, 8):
            raise ValueError(f"unsupported scale {self.scale}")
        if self.stl_per_dstb < 1:
            raise ValueError("stl_per_dstb must be positive")
        if self.upsampler not in UPSAMPLERS:
            raise ValueError(f"upsampler must be one of {UPSAMPLERS}")
        for w in self.dstb_widths:
            if w % self.heads:
                raise ValueError(f"STL width {w} not divisible by {self.heads} heads")

    @classmethod
    def rdst(cls, **kw) -> "RdstConfig":
        return cls(**kw)

    @classmethod
    def rdst_e(cls, **kw) -> "RdstConfig":
        kw.setdefault("n_rdstb", 4)
        return cls(**kw)

    @property
    def dstb_widths(self) -> list[int]:
        """Input width of each DSTB inside an RDSTB (60, 90, 120 by default)."""
        return [self.width + j * self.growth for j in range(self.dstb_per_rdstb)]

    @property
    def fused_width(self) -> int:
        return self.width + self.dstb_per_rdstb * self.growth

    def stl(self, dim: int) -> StlConfig:
        return StlConfig(dim=dim, heads=self.heads, mlp_ratio=self.mlp_ratio,
                         window=self.window, use_rel_pos_bias=self.use_rel_pos_bias)

    def up_factors(self) -> list[int]:
        if self.scale == 1:
            return []
        if self.upsampler != "staged":
            return [self.scale]
        if self.scale in (2, 4, 8):
            return [2] * int(np.log2(self.scale))
        return [self.scale]

    def to_meta(self, prefix: str = "config.") -> dict[str, str]:
        return {prefix + f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_meta(cls, meta: dict, prefix: str = "config.") -> "RdstConfig":
        return cls(**_parse_fields(cls, meta, prefix))


def _parse_fields(cls, meta: dict, prefix: str) -> dict:
    kw = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key not in meta:
            continue
        raw = meta[key]
        default = f.default
        if isinstance(default, bool):
            kw[f.name] = str(raw).strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            kw[f.name] = int(raw)
        elif isinstance(default, float):
            kw[f.name] = float(raw)
        elif isinstance(default, tuple):
            kw[f.name] = tuple(int(v) for v in str(raw).strip("()[] ").split(",") if v.strip())
        else:
            kw[f.name] = str(raw)
    return kw


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_rdst(cfg: RdstConfig, seed=0, dtype=np.float32) -> ParamStore:
    """Kaiming-uniform weights, zero biases, unit layer-norm gains.

    The LFF conv closing each residual block and the tail conv start at zero, so
    every RDSTB is an identity map and the output is a blank image at step 0.
    """
    rng = np.random.default_rng(seed)
    p = ParamStore(dtype)
    d, C = cfg.width, cfg.in_channels
    p.conv("head", C, d, 3, rng)
    for i in range(cfg.n_rdstb):
        for j, c in enumerate(cfg.dstb_widths):
            base = f"body.{i}.dstb.{j}"
            scfg = cfg.stl(c)
            for k in range(cfg.stl_per_dstb):
                init_stl(p, f"{base}.stl.{k}", scfg, rng)
            p.linear(f"{base}.bottleneck", c, cfg.growth, rng)
        p.conv(f"body.{i}.lff", cfg.fused_width, d, 3, rng, zero=True)
    if cfg.use_gff:
        p.linear("gff", cfg.n_rdstb * d, d, rng)
    p.conv("body_conv", d, d, 3, rng)
    factors = cfg.up_factors()
    if cfg.upsampler == "direct":
        if factors:
            p.conv("up.0", d, cfg.out_channels * cfg.scale ** 2, 3, rng, zero=True)
        else:
            p.conv("tail", d, cfg.out_channels, 3, rng, zero=True)
    else:
        for s, r in enumerate(factors):
            p.conv(f"up.{s}", d, d * r * r, 3, rng)
        p.conv("tail", d, cfg.out_channels, 3, rng, zero=True)
    return p


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _tokens(x: Tensor) -> Tensor:
    return x.transpose(0, 2, 3, 1)


def _channels(t: Tensor) -> Tensor:
    return t.transpose(0, 3, 1, 2)


def dstb_forward(x: Tensor, p: ParamStore, name: str, cfg: RdstConfig) -> Tensor:
    """[N,c,H,W] -> [N,c+g,H,W]: STLs at width c, affine bottleneck c->g, concat."""
    c = x.shape[1]
    scfg = cfg.stl(c)
    t = _tokens(x)
    for k in range(cfg.stl_per_dstb):
        t = stl_layer(t, p, f"{name}.stl.{k}", scfg, shifted=bool(k % 2))
    new = _channels(linear_layer(p, f"{name}.bottleneck", t))
    return T.concat([x, new], axis=1)


def rdstb_forward(x: Tensor, p: ParamStore, name: str, cfg: RdstConfig) -> Tensor:
    """Dense DSTB chain, 3x3 local feature fusion back to width d, residual add."""
    if x.shape[1] != cfg.width:
        raise ValueError(f"RDSTB input width {x.shape[1]} != {cfg.width}")
    h = x
    for j in range(cfg.dstb_per_rdstb):
        h = dstb_forward(h, p, f"{name}.dstb.{j}", cfg)
    return x + conv_layer(p, f"{name}.lff", h)


def gff_forward(features: list[Tensor], p: ParamStore, cfg: RdstConfig) -> Tensor:
    """Per-token affine fusion of every RDSTB output (n*d -> d)."""
    if not cfg.use_gff:
        raise ValueError("global feature fusion is disabled in this config")
    cat = T.concat(features, axis=1)
    return _channels(linear_layer(p, "gff", _tokens(cat)))


def rdst_forward(x: Tensor, p: ParamStore, cfg: RdstConfig, clamp_output: bool = False) -> Tensor:
    """Super-resolve x[N,C,H,W] -> [N,C,sH,sW]."""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input [N,{cfg.in_channels},H,W], got {x.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError("spatial extents must be positive")
    f_lr = conv_layer(p, "head", x)
    h = f_lr
    outs = []
    for i in range(cfg.n_rdstb):
        h = rdstb_forward(h, p, f"body.{i}", cfg)
        outs.append(h)
    if cfg.use_gff:
        h = gff_forward(outs, p, cfg)
    f_d = f_lr + conv_layer(p, "body_conv", h)
    y = f_d
    factors = cfg.up_factors()
    if cfg.upsampler == "direct":
        y = pixel_shuffle(conv_layer(p, "up.0", y), cfg.scale) if factors else conv_layer(p, "tail", y)
    else:
        for s, r in enumerate(factors):
            y = pixel_shuffle(conv_layer(p, f"up.{s}", y), r)
        y = conv_layer(p, "tail", y)
    if clamp_output:
        y = Tensor(np.clip(y.data, 0.0, 1.0))
    return y


class RdstModel:
    """Config plus parameters; the callable used by training and evaluation."""

    def __init__(self, config: RdstConfig, params: ParamStore | None = None, seed=0):
        self.config = config
        self.params = params if params is not None else init_rdst(config, seed)

    def __call__(self, x: Tensor) -> Tensor:
        return rdst_forward(x, self.params, self.config)

    def infer(self, lr: np.ndarray) -> np.ndarray:
        """Clamped inference on a [N,C,H,W] array."""
        with T.no_grad():
            x = Tensor(np.asarray(lr, dtype=self.params.dtype))
            return rdst_forward(x, self.params, self.config, clamp_output=True).data

    @property
    def scale(self) -> int:
        return self.config.scale

    def num_params(self) -> int:
        return self.params.num_params()

    def cost(self, input_shape) -> CostReport:
        return rdst_cost(self.config, input_shape)

    def save(self, path, extra=None, meta=None) -> None:
        save_model(path, self.config, self.params, extra, meta)

    @classmethod
    def load(cls, path) -> "RdstModel":
        cfg, params, _, _ = load_model(path)
        return cls(cfg, params)


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def rdst_cost(cfg: RdstConfig, input_shape) -> CostReport:
    """Analytic parameter and MAC count at ``input_shape`` = (N, C, H, W)."""
    N, C, H, W = input_shape
    if C != cfg.in_channels or min(N, H, W) < 1:
        raise ValueError(f"cannot resolve shapes for input {tuple(input_shape)}")
    rep = CostReport(input_shape=tuple(input_shape))
    d, px = cfg.width, N * H * W

    def conv(name, cin, cout, h, w):
        prm, mac = conv_cost(cin, cout, 3, h, w)
        rep.add(name, prm, mac * N)

    conv("head", C, d, H, W)
    grid = WindowGrid(cfg.window, (0, 0), H, W)
    hp, wp = grid.padded
    for i in range(cfg.n_rdstb):
        for j, c in enumerate(cfg.dstb_widths):
            base = f"body.{i}.dstb.{j}"
            scfg = cfg.stl(c)
            for k in range(cfg.stl_per_dstb):
                prm, mac = stl_cost(scfg, px, N * hp * wp)
                rep.add(f"{base}.stl.{k}", prm, mac)
            prm, mac = linear_cost(c, cfg.growth, px)
            rep.add(f"{base}.bottleneck", prm, mac)
        conv(f"body.{i}.lff", cfg.fused_width, d, H, W)
    if cfg.use_gff:
        prm, mac = linear_cost(cfg.n_rdstb * d, d, px)
        rep.add("gff", prm, mac)
    conv("body_conv", d, d, H, W)
    h, w = H, W
    factors = cfg.up_factors()
    if cfg.upsampler == "direct":
        if factors:
            conv("up.0", d, cfg.out_channels * cfg.scale ** 2, h, w)
        else:
            conv("tail", d, cfg.out_channels, h, w)
    else:
        for s, r in enumerate(factors):
            conv(f"up.{s}", d, d * r * r, h, w)
            h, w = h * r, w * r
        conv("tail", d, cfg.out_channels, h, w)
    return rep


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(path, cfg: RdstConfig, params: ParamStore, extra=None, meta=None) -> None:
    """Parameters go under ``param.``; ``extra`` arrays (e.g. optimizer state) under ``extra.``."""
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for n, t in params.items():
        arrays[f"param.{n}"] = t.data
    for n, a in (extra or {}).items():
        arrays[f"extra.{n}"] = np.asarray(a)
    head = {"kind": "rdst", **cfg.to_meta()}
    head.update(meta or {})
    save_checkpoint(path, arrays, head)


def load_model(path):
    """Returns (config, params, extra arrays, meta)."""
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "rdst":
        raise ValueError(f"{path}: not an RDST checkpoint (kind={meta.get('kind')})")
    cfg = RdstConfig.from_meta(meta)
    params = ParamStore.from_arrays((n[6:], a) for n, a in arrays.items() if n.startswith("param."))
    extra = OrderedDict((n[6:], a) for n, a in arrays.items() if n.startswith("extra."))
    expected = init_rdst(cfg, 0).names()
    if params.names() != expected:
        raise ValueError(f"{path}: parameter layout does not match its config")
    return cfg, params, extra, meta
