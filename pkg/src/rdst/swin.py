"""Shifted-window transformer layers: partitioning, cyclic shift, masked window attention."""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ParamStore, gelu, linear_layer, norm_layer, record_macs
from .tensor import Tensor

MASK_VALUE = -100.0


@dataclass(frozen=True)
class WindowGrid:
    window: int
    shift: tuple[int, int]
    height: int
    width: int

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window size must be positive")
        if not all(0 <= s < self.window for s in self.shift):
            raise ValueError(f"shift {self.shift} must lie in [0, {self.window})")

    @property
    def pad_h(self) -> int:
        return -self.height % self.window

    @property
    def pad_w(self) -> int:
        return -self.width % self.window

    @property
    def padded(self) -> tuple[int, int]:
        return self.height + self.pad_h, self.width + self.pad_w

    @property
    def num_windows(self) -> int:
        hp, wp = self.padded
        return (hp // self.window) * (wp // self.window)


@dataclass(frozen=True)
class StlConfig:
    dim: int
    heads: int = 6
    mlp_ratio: float = 2.0
    window: int = 8
    use_rel_pos_bias: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"embedding width {self.dim} not divisible by {self.heads} heads")

    @property
    def hidden(self) -> int:
        return int(self.mlp_ratio * self.dim)

    @property
    def shift(self) -> int:
        # odd windows round the half-window shift down
        return self.window // 2


# ---------------------------------------------------------------------------
# partitioning (token layout [N, H, W, c])
# ---------------------------------------------------------------------------


def _partition_tokens(x: Tensor, grid: WindowGrid) -> Tensor:
    N, H, W, c = x.shape
    M = grid.window
    if grid.pad_h or grid.pad_w:
        x = T.pad(x, [(0, 0), (0, grid.pad_h), (0, grid.pad_w), (0, 0)], mode="reflect")
    Hp, Wp = grid.padded
    y = x.reshape(N, Hp // M, M, Wp // M, M, c).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(N * grid.num_windows, M * M, c)


def _reverse_tokens(windows: Tensor, grid: WindowGrid) -> Tensor:
    M = grid.window
    Hp, Wp = grid.padded
    c = windows.shape[-1]
    N = windows.shape[0] // grid.num_windows
    y = windows.reshape(N, Hp // M, Wp // M, M, M, c).transpose(0, 1, 3, 2, 4, 5)
    y = y.reshape(N, Hp, Wp, c)
    if grid.pad_h or grid.pad_w:
        y = y[:, :grid.height, :grid.width, :]
    return y


def window_partition(x: Tensor, grid: WindowGrid) -> Tensor:
    """[N,c,H,W] -> [N*nw, M*M, c], windows row-major, tokens row-major inside."""
    return _partition_tokens(x.transpose(0, 2, 3, 1), grid)


def window_reverse(windows: Tensor, grid: WindowGrid) -> Tensor:
    """Inverse of :func:`window_partition`, cropping any padding."""
    return _reverse_tokens(windows, grid).transpose(0, 3, 1, 2)


def cyclic_shift(x: Tensor, shift: tuple[int, int], axes=(2, 3)) -> Tensor:
    """Torus roll by (-sy, -sx); ``cyclic_shift(x, (-sy, -sx))`` undoes it."""
    sy, sx = shift
    if sy == 0 and sx == 0:
        return x
    return T.roll(x, (-sy, -sx), axes)


def _shift_regions(n: int, M: int, s: int) -> np.ndarray:
    """Region label per row (or column) of a rolled axis of padded extent ``n``."""
    lab = np.zeros(n, dtype=np.int64)
    if s == 0 or n == M:
        # a lone window along this axis wraps onto itself: one region on the torus
        return lab
    lab[n - M:n - s] = 1
    lab[n - s:] = 2
    return lab


def shifted_window_mask(grid: WindowGrid) -> np.ndarray | None:
    """Additive mask [nw, M*M, M*M]; None when no token pair needs masking."""
    return _cached_mask(grid.window, grid.shift, grid.padded)


@functools.lru_cache(maxsize=64)
def _cached_mask(M: int, shift: tuple[int, int], padded: tuple[int, int]) -> np.ndarray | None:
    sy, sx = shift
    Hp, Wp = padded
    ry, rx = _shift_regions(Hp, M, sy), _shift_regions(Wp, M, sx)
    if not ry.any() and not rx.any():
        return None
    region = ry[:, None] * 3 + rx[None, :]
    win = region.reshape(Hp // M, M, Wp // M, M).transpose(0, 2, 1, 3).reshape(-1, M * M)
    mask = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    mask.flags.writeable = False
    return mask


def relative_position_index(M: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(M), np.arange(M), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (M - 1)
    return rel[..., 0] * (2 * M - 1) + rel[..., 1]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _attention_scores(q, k, bias, mask, B):
    s = np.matmul(q, np.swapaxes(k, -1, -2))
    if mask is None:
        if bias is not None:
            s += bias
        return s
    nw = mask.shape[0]
    add = mask[:, None].astype(s.dtype, copy=False)
    if bias is not None:
        add = add + bias[None]
    view = s.reshape(B // nw, nw, *s.shape[1:])
    view += add
    return s


def _row_sum(x):
    # a matmul against ones beats a last-axis reduction on short rows
    return np.matmul(x, np.ones((x.shape[-1], 1), dtype=x.dtype))


def _row_max(x):
    n = x.shape[-1]
    m = x
    while n > 1:
        h = n // 2
        nxt = np.maximum(m[..., :h], m[..., h:2 * h])
        if n % 2:
            nxt[..., :1] = np.maximum(nxt[..., :1], m[..., 2 * h:])
        m, n = nxt, h
    return m


def _softmax_rows(s):
    """Row softmax, computed in place on ``s``."""
    s -= _row_max(s)
    np.exp(s, out=s)
    s /= _row_sum(s)
    return s


def attention_core(qkv: Tensor, heads: int, bias: Tensor | None = None,
                   mask: np.ndarray | None = None) -> Tensor:
    """Fused softmax(Q K^T / sqrt(hd) + bias + mask) V over windows.

    ``qkv`` is [B, T, 3c] (q, k, v blocks of width c, heads contiguous in each);
    ``bias`` is [heads, T, T]; ``mask`` is [nw, T, T] with B a multiple of nw.
    """
    B, Tn, c3 = qkv.shape
    c = c3 // 3
    hd = c // heads
    scale = hd ** -0.5
    parts = qkv.data.reshape(B, Tn, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q = parts[0] * scale
    k, v = parts[1], parts[2]
    bd = None if bias is None else bias.data
    a = _softmax_rows(_attention_scores(q, k, bd, mask, B))
    o = np.matmul(a, v)
    out = np.ascontiguousarray(o.transpose(0, 2, 1, 3)).reshape(B, Tn, c)
    record_macs("attention", 2 * B * Tn * Tn * c)
    parents = (qkv,) if bias is None else (qkv, bias)

    def bw(g):
        go = np.ascontiguousarray(g.reshape(B, Tn, heads, hd).transpose(0, 2, 1, 3))
        dv = np.matmul(np.swapaxes(a, -1, -2), go)
        da = np.matmul(go, np.swapaxes(v, -1, -2))
        # sum_j dA_ij A_ij == dO_i . O_i, avoids a full-size temporary
        da -= (go * o).sum(axis=-1, keepdims=True)
        ds = np.multiply(da, a, out=da)
        dq = np.matmul(ds, k) * scale
        dk = np.matmul(np.swapaxes(ds, -1, -2), q)
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, Tn, c3)
        grads = (np.ascontiguousarray(dqkv),)
        if bias is not None:
            grads += (ds.sum(axis=0),)
        return grads

    return T._make(out, parents, bw, "window_attention")


def attention_weights(tokens: Tensor, p: ParamStore, name: str, cfg: StlConfig,
                      mask: np.ndarray | None = None) -> np.ndarray:
    """Post-softmax attention probabilities [B, heads, T, T] (inspection helper)."""
    qkv = linear_layer(p, f"{name}.qkv", tokens).data
    B, Tn, _ = qkv.shape
    hd = cfg.dim // cfg.heads
    parts = qkv.reshape(B, Tn, 3, cfg.heads, hd).transpose(2, 0, 3, 1, 4)
    bias = _relpos_bias(p, name, cfg)
    bd = None if bias is None else bias.data
    return _softmax_rows(_attention_scores(parts[0] * hd ** -0.5, parts[1], bd, mask, B))


def _relpos_bias(p: ParamStore, name: str, cfg: StlConfig) -> Tensor | None:
    if not cfg.use_rel_pos_bias:
        return None
    M = cfg.window
    index = relative_position_index(M).reshape(-1)
    b = T.take_rows(p[f"{name}.relpos"], index)  # [T*T, heads]
    return b.reshape(M * M, M * M, cfg.heads).transpose(2, 0, 1)


def window_msa(tokens: Tensor, p: ParamStore, name: str, cfg: StlConfig,
               mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention inside each window: tokens [B, M*M, c] -> same shape."""
    if tokens.shape[-1] != cfg.dim:
        raise ValueError(f"token width {tokens.shape[-1]} != configured {cfg.dim}")
    qkv = linear_layer(p, f"{name}.qkv", tokens)
    out = attention_core(qkv, cfg.heads, _relpos_bias(p, name, cfg), mask)
    return linear_layer(p, f"{name}.proj", out)


# ---------------------------------------------------------------------------
# transformer layers
# ---------------------------------------------------------------------------


def init_stl(p: ParamStore, name: str, cfg: StlConfig, rng) -> None:
    """Create the parameters of one STL (attention + MLP sub-blocks)."""
    c, M = cfg.dim, cfg.window
    p.norm(f"{name}.ln1", c)
    p.linear(f"{name}.qkv", c, 3 * c, rng)
    if cfg.use_rel_pos_bias:
        p.add(f"{name}.relpos", np.zeros(((2 * M - 1) ** 2, cfg.heads), dtype=p.dtype))
    p.linear(f"{name}.proj", c, c, rng)
    p.norm(f"{name}.ln2", c)
    p.linear(f"{name}.mlp1", c, cfg.hidden, rng)
    p.linear(f"{name}.mlp2", cfg.hidden, c, rng)


def init_stl_pair(p: ParamStore, prefix: str, cfg: StlConfig, rng) -> None:
    for i in range(2):
        init_stl(p, f"{prefix}stl.{i}", cfg, rng)


def stl_layer(x: Tensor, p: ParamStore, name: str, cfg: StlConfig, shifted: bool) -> Tensor:
    """One STL on token-layout input [N, H, W, c]."""
    N, H, W, c = x.shape
    s = cfg.shift if shifted else 0
    grid = WindowGrid(cfg.window, (s, s), H, W)
    h = norm_layer(p, f"{name}.ln1", x)
    if grid.pad_h or grid.pad_w:
        h = T.pad(h, [(0, 0), (0, grid.pad_h), (0, grid.pad_w), (0, 0)], mode="reflect")
    padded = WindowGrid(cfg.window, (s, s), *grid.padded)
    h = cyclic_shift(h, (s, s), axes=(1, 2))
    win = _partition_tokens(h, padded)
    att = window_msa(win, p, name, cfg, shifted_window_mask(padded))
    h = _reverse_tokens(att, padded)
    h = cyclic_shift(h, (-s, -s), axes=(1, 2))
    if grid.pad_h or grid.pad_w:
        h = h[:, :H, :W, :]
    x = x + h
    m = linear_layer(p, f"{name}.mlp1", norm_layer(p, f"{name}.ln2", x))
    return x + linear_layer(p, f"{name}.mlp2", gelu(m))


def stl_pair(x: Tensor, p: ParamStore, prefix: str, cfg: StlConfig) -> Tensor:
    """Regular then shifted STL on [N, c, H, W]; output has the input's shape."""
    t = x.transpose(0, 2, 3, 1)
    t = stl_layer(t, p, f"{prefix}stl.0", cfg, shifted=False)
    t = stl_layer(t, p, f"{prefix}stl.1", cfg, shifted=True)
    return t.transpose(0, 3, 1, 2)


def stl_cost(cfg: StlConfig, tokens: int, padded_tokens: int | None = None) -> tuple[int, int]:
    """(params, MACs) of one STL; attention and its projections run on the window-padded map."""
    c, h = cfg.dim, cfg.hidden
    padded_tokens = tokens if padded_tokens is None else padded_tokens
    params = 2 * c + (c * 3 * c + 3 * c) + (c * c + c) + 2 * c + (c * h + h) + (h * c + c)
    if cfg.use_rel_pos_bias:
        params += (2 * cfg.window - 1) ** 2 * cfg.heads
    macs = (padded_tokens * (4 * c * c + 2 * cfg.window ** 2 * c)
            + tokens * 2 * c * h)
    return params, macs
