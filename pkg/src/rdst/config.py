"""Flat ``key = value`` run configuration with typed defaults and ``--key=value`` overrides."""

from __future__ import annotations

from pathlib import Path

from .data import read_kv


class ConfigError(ValueError):
    pass


# key -> (type, default, help)
DEFAULTS: dict[str, tuple[type, object, str]] = {
    "seed": (int, 0, "single source of all randomness"),
    "run.dir": (str, "runs/default", "output directory for checkpoints, logs and reports"),
    # model
    "model.kind": (str, "rdst", "rdst (8 RDSTBs) or rdst-e (4 RDSTBs); model.n_rdstb overrides"),
    "model.scale": (int, 4, "magnification factor"),
    "model.width": (int, 60, "base feature width d"),
    "model.growth": (int, 30, "growth rate g per DSTB"),
    "model.window": (int, 8, "attention window M"),
    "model.heads": (int, 6, "attention heads"),
    "model.n_rdstb": (int, 0, "number of RDSTBs (0 = from model.kind)"),
    "model.dstb_per_rdstb": (int, 3, "DSTBs per RDSTB"),
    "model.stl_per_dstb": (int, 2, "STLs per DSTB (alternating regular/shifted)"),
    "model.mlp_ratio": (float, 2.0, "STL MLP hidden width / embedding width"),
    "model.rel_pos_bias": (bool, True, "relative position bias in window attention"),
    "model.gff": (bool, False, "global feature fusion across RDSTBs"),
    "model.upsampler": (str, "staged", "staged | single | direct"),
    "model.channels": (int, 1, "image channels C"),
    # data
    "data.root": (str, "data/phantoms", "dataset root holding train/val/test splits"),
    "data.count": (int, 200, "training phantoms written by gen-data"),
    "data.val_count": (int, 16, "validation phantoms"),
    "data.test_count": (int, 40, "held-out test phantoms"),
    "data.canvas": (int, 96, "phantom canvas side (HR pixels)"),
    "data.sigma": (float, 0.01, "std of additive Gaussian noise on LR images"),
    "data.hr_patch": (int, 96, "HR training patch side"),
    # training schedule
    "train.batch": (int, 32, "images per step"),
    "train.stage1.steps": (int, 2000, "L1 training steps"),
    "train.stage1.lr": (float, 2e-4, "constant stage-1 learning rate"),
    "train.stage2.steps": (int, 500, "fine-tuning steps"),
    "train.stage2.lr": (float, 1e-4, "initial stage-2 learning rate"),
    "train.stage2.milestones": (str, "0.5,0.75,0.875", "fractions of stage 2 where the lr halves"),
    "train.val_every": (float, 0.05, "validation cadence as a fraction of the stage"),
    "train.val_count": (int, 8, "validation images per check"),
    "train.checkpoint_every": (int, 0, "steps between resumable checkpoints (0 = end only)"),
    # loss
    "loss.alpha": (float, 1.0, "weight of the pixel L1 term"),
    "loss.lam": (float, 10.0, "weight of the perceptual term"),
    "loss.variant": (str, "E1", "none | E1..E5 | sumE | D | HRL"),
    # segmentation network
    "unet.base_width": (int, 64, "first encoder width (doubled per level)"),
    "unet.levels": (int, 5, "encoder levels"),
    "unet.classes": (int, 4, "segmentation classes including background"),
    "unet.steps": (int, 2000, "dice-loss training steps"),
    "unet.lr": (float, 1e-4, "initial learning rate"),
    "unet.milestones": (str, "0.5,0.75", "fractions where the lr halves"),
    "unet.batch": (int, 4, "images per step"),
    # evaluation / benchmarking
    "eval.split": (str, "test", "dataset split to evaluate"),
    "eval.grids": (int, 4, "comparison grid images to emit"),
    "bench.warmup": (int, 1, "untimed warm-up passes"),
    "bench.iters": (int, 5, "timed passes"),
}


def _convert(key: str, raw) -> object:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = DEFAULTS[key][0]
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            try:
                return int(text)
            except ValueError:
                val = float(text)
                if val != int(val):
                    raise
                return int(val)
        if typ is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value {text!r} for {key} (expected {typ.__name__})") from exc
    return text


class Config:
    def __init__(self, values: dict | None = None):
        self.values = {k: v[1] for k, v in DEFAULTS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        self.values[key] = _convert(key, value)

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def floats(self, key: str) -> tuple[float, ...]:
        text = str(self[key]).strip()
        try:
            return tuple(float(v) for v in text.split(",") if v.strip())
        except ValueError as exc:
            raise ConfigError(f"{key} must be a comma-separated list of numbers") from exc

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "Config":
        cfg = cls()
        if path is not None:
            try:
                entries = read_kv(Path(path).read_text())
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            for k, v in entries.items():
                cfg.set(k, v)
        for k, v in (overrides or {}).items():
            cfg.set(k, v)
        return cfg

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.values.items())

    def snapshot(self) -> dict:
        return dict(self.values)


def describe_keys() -> str:
    width = max(len(k) for k in DEFAULTS)
    return "\n".join(f"{k:<{width}}  {t.__name__:<5}  {d!s:<16} {h}" for k, (t, d, h) in DEFAULTS.items())
