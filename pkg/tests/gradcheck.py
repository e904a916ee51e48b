"""Central finite-difference gradient checks shared by the unit and acceptance suites.

Each catalog entry maps a seeded numpy Generator to ``(fn, inputs)``: ``fn`` takes
Tensors and returns a Tensor, ``inputs`` are float64 arrays.  A non-scalar output is
contracted with a fixed random weight so every case checks a scalar loss.

Small cases compare the full gradient element by element.  Large ones (whole
layers, model blocks) compare directional derivatives along random directions,
which is the same central difference taken along a random vector.
"""

from __future__ import annotations

import numpy as np

from rdst import tensor as T
from rdst.losses import (l1_loss, perceptual_D, perceptual_E, perceptual_HRL, perceptual_sumE)
from rdst.model import RdstConfig, dstb_forward, init_rdst, rdst_forward, rdstb_forward
from rdst.nn import ParamStore, conv2d, layer_norm, linear, pixel_shuffle, pixel_unshuffle
from rdst.swin import StlConfig, attention_core, init_stl_pair, shifted_window_mask, stl_pair, WindowGrid
from rdst.tensor import Tensor
from rdst.unet import UNet, UNetConfig, dice_loss, init_unet, soft_dice, unet_forward

H = 1e-6
TOL = 1e-4
CASES = 100
KINK_TOL = 1e-6
KINK_RETRIES = 5


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / scale)


def _scalarize(out: Tensor, weight: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * Tensor(weight)).sum()


def check_case(fn, inputs, rng, directions: int | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    with T.no_grad():
        probe = fn(*[Tensor(a) for a in inputs])
    weight = None if probe.size == 1 else rng.standard_normal(probe.shape)

    def f(arrs):
        with T.no_grad():
            return _scalarize(fn(*[Tensor(a) for a in arrs]), weight).item()

    ts = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    T.backward(_scalarize(fn(*ts), weight))
    analytic = [t.grad for t in ts]
    if directions is None:
        worst = 0.0
        for k, a in enumerate(inputs):
            num = np.zeros_like(a)
            flat = num.reshape(-1)
            for i in range(a.size):
                plus = [x.copy() for x in inputs]
                minus = [x.copy() for x in inputs]
                plus[k].reshape(-1)[i] += H
                minus[k].reshape(-1)[i] -= H
                flat[i] = (f(plus) - f(minus)) / (2 * H)
            worst = max(worst, rel_err(analytic[k], num))
        return worst
    def central(vs, h):
        plus = [a + h * v for a, v in zip(inputs, vs)]
        minus = [a - h * v for a, v in zip(inputs, vs)]
        return (f(plus) - f(minus)) / (2 * h)

    an, nu = [], []
    for _ in range(directions):
        # a stencil straddling a ReLU kink is not a valid oracle: the h and h/2
        # estimates then disagree, so draw another direction
        for _ in range(KINK_RETRIES):
            vs = [rng.standard_normal(a.shape) for a in inputs]
            d = central(vs, H)
            if abs(d - central(vs, H / 2)) <= KINK_TOL * max(abs(d), 1e-3):
                break
        nu.append(d)
        an.append(sum(float(np.sum(g * v)) for g, v in zip(analytic, vs)))
    return rel_err(np.array(an), np.array(nu))


# ---------------------------------------------------------------------------
# helpers for building cases
# ---------------------------------------------------------------------------


def _shape(rng, max_rank=4, max_extent=3):
    return tuple(int(n) for n in rng.integers(1, max_extent + 1, size=rng.integers(1, max_rank + 1)))


def _away_from_zero(rng, shape, lo=0.1):
    return rng.uniform(lo, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _positive(rng, shape):
    return rng.uniform(0.3, 2.0, size=shape)


def _broadcast_pair(rng):
    a = _shape(rng, 3)
    b = list(a[len(a) - rng.integers(0, len(a) + 1):])
    b = [1 if rng.random() < 0.4 else n for n in b]
    return a, tuple(b) or (1,)


def _params_from(p: ParamStore, names, tensors):
    """A float64 store holding ``tensors`` under ``names`` and copies of the rest of ``p``."""
    given = dict(zip(names, tensors))
    q = ParamStore(np.float64)
    for n in p.names():
        q.add(n, given[n] if n in given else p[n].data.astype(np.float64))
    return q


def _stack_params(p: ParamStore, rng, jitter=True):
    """Float64 copies of every parameter; zero-initialised ones get random values."""
    arrays = []
    for n in p.names():
        a = p[n].data.astype(np.float64)
        if jitter:
            a = a + 0.1 * rng.standard_normal(a.shape)
        arrays.append(a)
    return p.names(), arrays


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


def case_add(rng):
    sa, sb = _broadcast_pair(rng)
    return (lambda a, b: T.add(a, b)), [rng.standard_normal(sa), rng.standard_normal(sb)]


def case_sub(rng):
    sa, sb = _broadcast_pair(rng)
    return (lambda a, b: T.sub(b, a)), [rng.standard_normal(sa), rng.standard_normal(sb)]


def case_mul(rng):
    sa, sb = _broadcast_pair(rng)
    return (lambda a, b: T.mul(a, b)), [rng.standard_normal(sa), rng.standard_normal(sb)]


def case_div(rng):
    sa, sb = _broadcast_pair(rng)
    return (lambda a, b: T.div(a, b)), [rng.standard_normal(sa), _away_from_zero(rng, sb, 0.5)]


def _unary(op, sampler):
    def build(rng):
        return (lambda a: op(a)), [sampler(rng, _shape(rng))]
    return build


def case_power(rng):
    p = float(rng.choice([2.0, 3.0, 0.5, -1.0, 1.5]))
    return (lambda a: T.power(a, p)), [_positive(rng, _shape(rng))]


def case_clamp(rng):
    x = rng.uniform(-2, 2, size=_shape(rng))
    x[np.abs(np.abs(x) - 1) < 0.05] += 0.1  # keep the kinks out of the difference stencil
    return (lambda a: T.clamp(a, -1.0, 1.0)), [x]


def case_sum(rng):
    s = _shape(rng)
    axis = int(rng.integers(0, len(s)))
    keep = bool(rng.integers(0, 2))
    return (lambda a: T.tsum(a, axis=axis, keepdims=keep)), [rng.standard_normal(s)]


def case_mean(rng):
    s = _shape(rng)
    axis = None if rng.random() < 0.3 else int(rng.integers(0, len(s)))
    return (lambda a: T.mean(a, axis=axis)), [rng.standard_normal(s)]


def case_reshape(rng):
    s = _shape(rng)
    return (lambda a: T.reshape(a, (-1,))), [rng.standard_normal(s)]


def case_transpose(rng):
    s = _shape(rng)
    perm = tuple(int(i) for i in rng.permutation(len(s)))
    return (lambda a: T.transpose(a, perm)), [rng.standard_normal(s)]


def case_getitem(rng):
    s = _shape(rng, 3, 4)
    idx = tuple(slice(int(rng.integers(0, n)), None) for n in s)
    if rng.random() < 0.5:
        idx = (rng.integers(0, s[0], size=3),) + idx[1:]  # fancy index with repeats
    return (lambda a: T.getitem(a, idx)), [rng.standard_normal(s)]


def case_concat(rng):
    s = list(_shape(rng, 3))
    axis = int(rng.integers(0, len(s)))
    s2 = list(s)
    s2[axis] = int(rng.integers(1, 4))
    return (lambda a, b: T.concat([a, b], axis=axis)), [rng.standard_normal(s), rng.standard_normal(s2)]


def case_pad(rng):
    s = tuple(int(n) for n in rng.integers(2, 5, size=3))
    widths = [(int(rng.integers(0, n)), int(rng.integers(0, n))) for n in s]
    mode = str(rng.choice(["reflect", "constant"]))
    return (lambda a: T.pad(a, widths, mode=mode)), [rng.standard_normal(s)]


def case_roll(rng):
    s = tuple(int(n) for n in rng.integers(2, 5, size=3))
    shifts = (int(rng.integers(-3, 4)), int(rng.integers(-3, 4)))
    return (lambda a: T.roll(a, shifts, (1, 2))), [rng.standard_normal(s)]


def case_take_rows(rng):
    n, h = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    index = rng.integers(0, n, size=int(rng.integers(1, 10)))
    return (lambda a: T.take_rows(a, index)), [rng.standard_normal((n, h))]


def case_upsample(rng):
    s = (1, 2, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    return (lambda a: T.upsample_nearest(a, 2)), [rng.standard_normal(s)]


def case_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
    batch = tuple(int(v) for v in rng.integers(1, 3, size=rng.integers(0, 3)))
    bb = batch[1:] if batch and rng.random() < 0.5 else batch  # broadcast batch extents
    return (lambda a, b: T.matmul(a, b)), [rng.standard_normal(batch + (m, k)), rng.standard_normal(bb + (k, n))]


def case_softmax(rng):
    s = _shape(rng)
    axis = int(rng.integers(0, len(s)))
    return (lambda a: T.softmax(a, axis=axis)), [2 * rng.standard_normal(s)]


def case_layer_norm(rng):
    s = _shape(rng, 3) + (int(rng.integers(2, 6)),)
    d = s[-1]
    return (lambda x, g, b: layer_norm(x, g, b)), [rng.standard_normal(s), rng.standard_normal(d),
                                                   rng.standard_normal(d)]


def case_gelu(rng):
    return (lambda a: T.gelu(a)), [3 * rng.standard_normal(_shape(rng))]


def case_linear(rng):
    din, dout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    s = _shape(rng, 2) + (din,)
    return (lambda x, w, b: linear(x, w, b)), [rng.standard_normal(s), rng.standard_normal((din, dout)),
                                               rng.standard_normal(dout)]


def case_conv2d(rng):
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k))
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(max(1, k - 2 * pad), 5, size=2))
    return (lambda x, wt, b: conv2d(x, wt, b, stride=stride, pad=pad)), [
        rng.standard_normal((int(rng.integers(1, 3)), cin, h, w)),
        rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)]


def case_pixel_shuffle(rng):
    r = int(rng.choice([2, 3]))
    s = (1, r * r * int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    if rng.random() < 0.5:
        return (lambda a: pixel_shuffle(a, r)), [rng.standard_normal(s)]
    s2 = (1, s[1] // (r * r), s[2] * r, s[3] * r)
    return (lambda a: pixel_unshuffle(a, r)), [rng.standard_normal(s2)]


def case_attention(rng):
    heads = int(rng.choice([1, 2]))
    hd = int(rng.integers(1, 3))
    c = heads * hd
    M = 2
    nw = int(rng.choice([1, 2]))
    B = nw * int(rng.integers(1, 3))
    Tn = M * M
    use_mask = rng.random() < 0.5
    mask = None
    if use_mask:
        grid = WindowGrid(M, (1, 1), M, M * nw)
        mask = shifted_window_mask(grid)
        if mask is not None and mask.shape[0] != nw:
            mask = None
    inputs = [rng.standard_normal((B, Tn, 3 * c)), 0.5 * rng.standard_normal((heads, Tn, Tn))]
    return (lambda qkv, bias: attention_core(qkv, heads, bias, mask)), inputs


# -- whole layers and blocks (directional checks) ----------------------------

DIRECTIONAL = {}


def directional(n):
    def wrap(fn):
        DIRECTIONAL[fn.__name__] = n
        return fn
    return wrap


@directional(3)
def case_stl_pair(rng):
    """The full regular + shifted STL pair on a 1x12x8x8 map, parameters included."""
    cfg = StlConfig(dim=12, heads=3, window=4)
    p = ParamStore(np.float64)
    init_stl_pair(p, "", cfg, rng)
    names, arrays = _stack_params(p, rng)

    def fn(x, *params):
        return stl_pair(x, _params_from(p, names, params), "", cfg)

    return fn, [rng.standard_normal((1, 12, 8, 8))] + arrays


@directional(3)
def case_stl_pair_padded(rng):
    """Non-divisible map: reflect padding, shift and crop on the gradient path."""
    cfg = StlConfig(dim=6, heads=2, window=4)
    p = ParamStore(np.float64)
    init_stl_pair(p, "", cfg, rng)
    names, arrays = _stack_params(p, rng)

    def fn(x, *params):
        return stl_pair(x, _params_from(p, names, params), "", cfg)

    return fn, [rng.standard_normal((1, 6, 6, 5))] + arrays


_TINY = RdstConfig(scale=2, width=6, growth=3, window=2, heads=3, n_rdstb=1, dstb_per_rdstb=2)


@directional(3)
def case_dstb(rng):
    p = init_rdst(_TINY, int(rng.integers(1 << 30)), np.float64)
    names = [n for n in p.names() if n.startswith("body.0.dstb.0.")]
    arrays = [p[n].data + 0.1 * rng.standard_normal(p[n].shape) for n in names]

    def fn(x, *params):
        return dstb_forward(x, _params_from(p, names, params), "body.0.dstb.0", _TINY)

    return fn, [rng.standard_normal((1, 6, 4, 4))] + arrays


@directional(3)
def case_rdstb(rng):
    p = init_rdst(_TINY, int(rng.integers(1 << 30)), np.float64)
    names = [n for n in p.names() if n.startswith("body.0.")]
    arrays = [p[n].data + 0.1 * rng.standard_normal(p[n].shape) for n in names]

    def fn(x, *params):
        return rdstb_forward(x, _params_from(p, names, params), "body.0", _TINY)

    return fn, [rng.standard_normal((1, 6, 4, 4))] + arrays


@directional(3)
def case_rdst_l1(rng):
    """End to end: tiny RDST (with GFF on half the cases) under the L1 loss."""
    cfg = RdstConfig(scale=2, width=6, growth=3, window=2, heads=3, n_rdstb=2, dstb_per_rdstb=1,
                     use_gff=bool(rng.integers(0, 2)))
    p = init_rdst(cfg, int(rng.integers(1 << 30)), np.float64)
    names, arrays = _stack_params(p, rng)
    hr = rng.random((1, 1, 8, 6))

    def fn(x, *params):
        return l1_loss(rdst_forward(x, _params_from(p, names, params), cfg), hr)

    return fn, [rng.random((1, 1, 4, 3))] + arrays


def case_l1(rng):
    s = _shape(rng)
    hr = rng.standard_normal(s)
    sr = hr + _away_from_zero(rng, s, 0.05)
    return (lambda a: l1_loss(a, hr)), [sr]


_UCFG = UNetConfig(base_width=2, levels=3, classes=4, blocks_per_level=1)


def _unet_with(rng, cfg=_UCFG):
    p = init_unet(cfg, int(rng.integers(1 << 30)), np.float64)
    for n in p.names():
        p[n].data += 0.2 * rng.standard_normal(p[n].shape)
    return UNet(cfg, p.freeze())


@directional(3)
def case_unet(rng):
    """U-Net forward (every parameter) under the dice loss."""
    cfg = _UCFG if rng.random() < 0.5 else UNetConfig(base_width=2, levels=2, classes=2, blocks_per_level=1)
    p = init_unet(cfg, int(rng.integers(1 << 30)), np.float64)
    names, arrays = _stack_params(p, rng)
    labels = rng.integers(0, cfg.classes, size=(2, 8, 8))

    def fn(x, *params):
        return dice_loss(unet_forward(x, _params_from(p, names, params), cfg).probs, labels)

    return fn, [rng.random((2, 1, 8, 8))] + arrays


def case_soft_dice(rng):
    k = int(rng.integers(1, 4))
    s = (int(rng.integers(1, 3)), k, 3, 3)
    target = (rng.random(s) < 0.5).astype(np.float64)
    eps = float(rng.choice([1.0, 1e-3]))
    squared = bool(rng.random() < 0.5)
    return (lambda pr: soft_dice(pr, target, eps, squared)), [rng.uniform(0.05, 0.95, size=s)]


@directional(4)
def case_perceptual_E(rng):
    unet = _unet_with(rng)
    i = int(rng.integers(1, _UCFG.levels + 1))
    hr = rng.random((1, 1, 8, 8))
    return (lambda sr: perceptual_E(i, sr, hr, unet)), [rng.random((1, 1, 8, 8))]


@directional(4)
def case_perceptual_sumE(rng):
    unet = _unet_with(rng)
    hr = rng.random((1, 1, 8, 8))
    return (lambda sr: perceptual_sumE(sr, hr, unet)), [rng.random((1, 1, 8, 8))]


@directional(4)
def case_perceptual_D(rng):
    unet = _unet_with(rng)
    hr = rng.random((1, 1, 8, 8))
    return (lambda sr: perceptual_D(sr, hr, unet)), [rng.random((1, 1, 8, 8))]


@directional(4)
def case_perceptual_HRL(rng):
    unet = _unet_with(rng)
    hr = rng.random((1, 1, 8, 8))
    return (lambda sr: perceptual_HRL(sr, hr, unet)), [rng.random((1, 1, 8, 8))]


CATALOG = {
    "add": case_add, "sub": case_sub, "mul": case_mul, "div": case_div,
    "neg": _unary(T.neg, lambda r, s: r.standard_normal(s)),
    "power": case_power,
    "exp": _unary(T.exp, lambda r, s: r.standard_normal(s)),
    "log": _unary(T.log, _positive),
    "sqrt": _unary(T.sqrt, _positive),
    "abs": _unary(T.tabs, _away_from_zero),
    "relu": _unary(T.relu, _away_from_zero),
    "sigmoid": _unary(T.sigmoid, lambda r, s: 3 * r.standard_normal(s)),
    "clamp": case_clamp,
    "gelu": case_gelu,
    "sum": case_sum, "mean": case_mean, "reshape": case_reshape, "transpose": case_transpose,
    "getitem": case_getitem, "concat": case_concat, "pad": case_pad, "roll": case_roll,
    "take_rows": case_take_rows, "upsample_nearest": case_upsample,
    "matmul": case_matmul, "softmax": case_softmax, "layer_norm": case_layer_norm,
    "linear": case_linear, "conv2d": case_conv2d, "pixel_shuffle": case_pixel_shuffle,
    "window_attention": case_attention,
    "stl_pair": case_stl_pair, "stl_pair_padded": case_stl_pair_padded,
    "dstb": case_dstb, "rdstb": case_rdstb, "rdst_l1": case_rdst_l1,
    "unet_dice": case_unet,
    "loss_l1": case_l1, "loss_soft_dice": case_soft_dice,
    "loss_E": case_perceptual_E, "loss_sumE": case_perceptual_sumE,
    "loss_D": case_perceptual_D, "loss_HRL": case_perceptual_HRL,
}


def run_entry(name: str, cases: int = CASES, seed: int = 0) -> tuple[int, float]:
    """Run ``cases`` random instances of one entry; returns (count, worst error)."""
    build = CATALOG[name]
    directions = DIRECTIONAL.get(build.__name__)
    worst = 0.0
    for i in range(cases):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        fn, inputs = build(rng)
        worst = max(worst, check_case(fn, inputs, rng, directions))
    return cases, worst
