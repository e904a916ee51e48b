"""Five-level residual-encoder segmentation U-Net, dice scores and its training loop."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .io import load_checkpoint, save_checkpoint
from .nn import ParamStore, conv_layer
from .optim import AdamState, adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)

DICE_EPS = 1.0


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    classes: int = 4
    base_width: int = 64
    levels: int = 5
    blocks_per_level: int = 2

    def __post_init__(self):
        if self.classes < 1 or self.levels < 1 or self.base_width < 1:
            raise ValueError("invalid U-Net config")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.levels)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def out_channels(self) -> int:
        # binary tasks use one sigmoid channel, otherwise softmax over all classes
        return 1 if self.classes <= 2 else self.classes

    def to_meta(self, prefix="unet.") -> dict[str, str]:
        return {prefix + f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_meta(cls, meta, prefix="unet.") -> "UNetConfig":
        return cls(**{f.name: int(meta[prefix + f.name]) for f in dataclasses.fields(cls)
                      if prefix + f.name in meta})


@dataclass
class UNetTaps:
    encoder: list  # E1..E5 as Tensors
    decoder: Tensor  # D
    logits: Tensor
    probs: Tensor

    def E(self, i: int) -> Tensor:
        if not 1 <= i <= len(self.encoder):
            raise IndexError(f"encoder tap E{i} does not exist")
        return self.encoder[i - 1]

    @property
    def labels(self) -> np.ndarray:
        p = self.probs.data
        if p.shape[1] == 1:
            return (p[:, 0] > 0.5).astype(np.int64)
        return p.argmax(axis=1)


def init_unet(cfg: UNetConfig, seed=0, dtype=np.float32) -> ParamStore:
    """Kaiming-uniform convs; the last conv of every residual branch starts at zero."""
    rng = np.random.default_rng(seed)
    p = ParamStore(dtype)
    w = cfg.widths
    p.conv("enc.0.stem", cfg.in_channels, w[0], 3, rng)
    for lvl in range(cfg.levels):
        if lvl:
            p.conv(f"enc.{lvl}.down", w[lvl - 1], w[lvl], 3, rng)
        for b in range(cfg.blocks_per_level):
            p.conv(f"enc.{lvl}.block.{b}.conv1", w[lvl], w[lvl], 3, rng)
            p.conv(f"enc.{lvl}.block.{b}.conv2", w[lvl], w[lvl], 3, rng, zero=True)
    for lvl in range(cfg.levels - 2, -1, -1):
        p.conv(f"dec.{lvl}.up", w[lvl + 1], w[lvl], 3, rng)
        p.conv(f"dec.{lvl}.fuse", 2 * w[lvl], w[lvl], 3, rng)
    p.conv("head", w[0], cfg.out_channels, 1, rng)
    return p


def unet_forward(x: Tensor, p: ParamStore, cfg: UNetConfig) -> UNetTaps:
    """One pass producing every tap (E1..E5, D), logits and probabilities."""
    N, C, H, W = x.shape
    if C != cfg.in_channels:
        raise ValueError(f"U-Net expects {cfg.in_channels} channels, got {C}")
    if H % cfg.divisor or W % cfg.divisor:
        raise ValueError(f"U-Net input {H}x{W} not divisible by {cfg.divisor}")
    h = T.relu(conv_layer(p, "enc.0.stem", x))
    taps = []
    for lvl in range(cfg.levels):
        if lvl:
            h = T.relu(conv_layer(p, f"enc.{lvl}.down", h, stride=2))
        for b in range(cfg.blocks_per_level):
            name = f"enc.{lvl}.block.{b}"
            r = conv_layer(p, f"{name}.conv2", T.relu(conv_layer(p, f"{name}.conv1", h)))
            h = T.relu(h + r)
        taps.append(h)
    for lvl in range(cfg.levels - 2, -1, -1):
        u = T.relu(conv_layer(p, f"dec.{lvl}.up", T.upsample_nearest(h, 2)))
        h = T.relu(conv_layer(p, f"dec.{lvl}.fuse", T.concat([u, taps[lvl]], axis=1)))
    logits = conv_layer(p, "head", h)
    probs = T.sigmoid(logits) if cfg.out_channels == 1 else T.softmax(logits, axis=1)
    return UNetTaps(taps, h, logits, probs)


class UNet:
    def __init__(self, config: UNetConfig, params: ParamStore | None = None, seed=0):
        self.config = config
        self.params = params if params is not None else init_unet(config, seed)

    def __call__(self, x: Tensor) -> UNetTaps:
        return unet_forward(x, self.params, self.config)

    def predict(self, images: np.ndarray, batch: int = 16) -> np.ndarray:
        """Integer label maps for [N,C,H,W] images."""
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch):
                x = Tensor(np.asarray(images[i:i + batch], dtype=self.params.dtype))
                out.append(self(x).labels)
        return np.concatenate(out)

    def save(self, path, meta=None) -> None:
        save_unet(path, self.config, self.params, meta=meta)

    @classmethod
    def load(cls, path) -> "UNet":
        cfg, params, _, _ = load_unet(path)
        return cls(cfg, params.freeze())


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------


def dice_coefficient(x: np.ndarray, y: np.ndarray, eps: float = DICE_EPS) -> float:
    """(2|X and Y| + eps) / (|X| + |Y| + eps) for binary masks."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"mask shapes differ: {x.shape} vs {y.shape}")
    xb, yb = x.astype(bool), y.astype(bool)
    inter = np.logical_and(xb, yb).sum()
    denom = xb.sum() + yb.sum()
    if denom == 0 and eps == 0:
        return 1.0
    return float((2.0 * inter + eps) / (denom + eps))


def one_hot(labels: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    """[N,H,W] integers -> [N,K,H,W]; a single channel holds the foreground for K <= 2."""
    labels = np.asarray(labels)
    if classes <= 2:
        return (labels > 0).astype(dtype)[:, None]
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError("label outside the class range")
    return (labels[:, None] == np.arange(classes)[None, :, None, None]).astype(dtype)


def soft_dice(probs: Tensor, target, eps: float = DICE_EPS, squared: bool = False) -> Tensor:
    """Mean over channels of the soft dice between [N,K,H,W] maps.

    ``squared`` uses sum(p^2) + sum(q^2) in the denominator, which makes two
    identical soft maps score exactly 1.
    """
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=probs.dtype))
    if probs.shape != target.shape:
        raise ValueError(f"class maps differ in shape: {probs.shape} vs {target.shape}")
    axes = (0, 2, 3)
    inter = (probs * target).sum(axis=axes)
    if squared:
        denom = (probs * probs).sum(axis=axes) + (target * target).sum(axis=axes)
    else:
        denom = probs.sum(axis=axes) + target.sum(axis=axes)
    return ((inter * 2.0 + eps) / (denom + eps)).mean()


def dice_loss(probs: Tensor, labels: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean soft dice between predicted probabilities and integer labels."""
    k = probs.shape[1]
    classes = 2 if k == 1 else k
    if labels.ndim != 3 or labels.shape[0] != probs.shape[0]:
        raise ValueError("labels must be [N,H,W] matching the batch")
    if k > 1 and labels.max() >= k:
        raise ValueError(f"labels reference class {labels.max()} but the head has {k} classes")
    return 1.0 - soft_dice(probs, one_hot(labels, classes, probs.dtype), eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class UNetSchedule:
    steps: int = 2000
    lr: float = 1e-4
    milestones: tuple = (0.5, 0.75)  # fractions of ``steps``; lr halves at each
    batch: int = 4
    seed: int = 0

    def lr_at(self, step: int) -> float:
        n = sum(1 for m in self.milestones if step >= int(round(m * self.steps)))
        return self.lr * 0.5 ** n


def train_unet(dataset, cfg: UNetConfig, schedule: UNetSchedule, out_path=None,
               curve: list | None = None) -> ParamStore:
    """Dice-loss training on (hr, labels); deterministic per ``schedule.seed``."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.labels is None:
        raise ValueError("segmentation training needs labels")
    params = init_unet(cfg, schedule.seed)
    state = AdamState()
    n = len(dataset)
    curve = [] if curve is None else curve
    for step in range(schedule.steps):
        rng = np.random.default_rng([schedule.seed, step])
        idx = rng.choice(n, size=min(schedule.batch, n), replace=False) if n > 1 else np.zeros(1, int)
        idx = np.sort(idx)
        x = Tensor(dataset.hr[idx].astype(params.dtype))
        params.zero_grad()
        loss = dice_loss(unet_forward(x, params, cfg).probs, dataset.labels[idx])
        loss.backward()
        adam_step(params, schedule.lr_at(step), state)
        curve.append(loss.item())
        if step % max(1, schedule.steps // 20) == 0:
            log.info("unet step %d dice-loss %.4f", step, curve[-1])
    if out_path is not None:
        save_unet(out_path, cfg, params, meta={"steps": str(schedule.steps), "seed": str(schedule.seed)})
    return params


def save_unet(path, cfg: UNetConfig, params: ParamStore, extra=None, meta=None) -> None:
    arrays = {f"param.{n}": t.data for n, t in params.items()}
    for n, a in (extra or {}).items():
        arrays[f"extra.{n}"] = a
    head = {"kind": "unet", **cfg.to_meta()}
    head.update(meta or {})
    save_checkpoint(path, arrays, head)


def load_unet(path):
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "unet":
        raise ValueError(f"{path}: not a U-Net checkpoint")
    cfg = UNetConfig.from_meta(meta)
    params = ParamStore.from_arrays((n[6:], a) for n, a in arrays.items() if n.startswith("param."))
    extra = {n[6:]: a for n, a in arrays.items() if n.startswith("extra.")}
    return cfg, params, extra, meta
