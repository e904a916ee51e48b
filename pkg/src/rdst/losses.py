"""Training objectives (pixel L1, segmentation perceptual losses) and evaluation metrics."""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor
from .unet import DICE_EPS, UNet, dice_coefficient, soft_dice

PSNR_CAP = 100.0
VARIANTS = ("none", "E1", "E2", "E3", "E4", "E5", "sumE", "D", "HRL")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def l1_loss(sr: Tensor, hr) -> Tensor:
    """Mean absolute difference over every element."""
    hr = hr if isinstance(hr, Tensor) else Tensor(np.asarray(hr, dtype=sr.dtype))
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    return T.tabs(sr - hr).mean()


def _reference_taps(unet: UNet, hr):
    with T.no_grad():
        return unet(hr if isinstance(hr, Tensor) else Tensor(np.asarray(hr, dtype=unet.params.dtype)))


def perceptual_E(i: int, sr: Tensor, hr, unet: UNet, hr_taps=None) -> Tensor:
    """L1 distance between encoder taps E_i of the frozen U-Net."""
    if not 1 <= i <= unet.config.levels:
        raise ValueError(f"encoder block {i} out of range 1..{unet.config.levels}")
    ref = hr_taps or _reference_taps(unet, hr)
    return l1_loss(unet(sr).E(i), ref.E(i).detach())


def perceptual_sumE(sr: Tensor, hr, unet: UNet, hr_taps=None) -> Tensor:
    ref = hr_taps or _reference_taps(unet, hr)
    taps = unet(sr)
    total = None
    for i in range(1, unet.config.levels + 1):
        term = l1_loss(taps.E(i), ref.E(i).detach())
        total = term if total is None else total + term
    return total


def perceptual_D(sr: Tensor, hr, unet: UNet, hr_taps=None) -> Tensor:
    """L1 distance between the last decoder features."""
    ref = hr_taps or _reference_taps(unet, hr)
    return l1_loss(unet(sr).decoder, ref.decoder.detach())


def perceptual_HRL(sr: Tensor, hr, unet: UNet, hr_taps=None, eps: float = DICE_EPS) -> Tensor:
    """1 - soft dice between the predicted class maps of SR and HR (zero when they agree)."""
    ref = hr_taps or _reference_taps(unet, hr)
    return 1.0 - soft_dice(unet(sr).probs, ref.probs.detach(), eps, squared=True)


@dataclass(frozen=True)
class LossSpec:
    alpha: float = 1.0
    lam: float = 10.0
    variant: str = "E1"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; choose from {VARIANTS}")
        if self.alpha < 0 or self.lam < 0 or (self.alpha == 0 and self.lam == 0):
            raise ValueError("alpha and lambda must be non-negative and not both zero")

    @property
    def needs_unet(self) -> bool:
        return self.variant != "none"


def perceptual(variant: str, sr: Tensor, hr, unet: UNet) -> Tensor:
    if variant.startswith("E") and variant[1:].isdigit():
        return perceptual_E(int(variant[1:]), sr, hr, unet)
    if variant == "sumE":
        return perceptual_sumE(sr, hr, unet)
    if variant == "D":
        return perceptual_D(sr, hr, unet)
    if variant == "HRL":
        return perceptual_HRL(sr, hr, unet)
    raise ValueError(f"no perceptual term for variant {variant!r}")


def combined_loss(spec: LossSpec, sr: Tensor, hr, unet: UNet | None = None) -> tuple[Tensor, dict]:
    """alpha * L1 + lambda * L_U; returns the total and its logged components."""
    if spec.needs_unet and spec.lam > 0 and unet is None:
        raise ValueError(f"loss variant {spec.variant} needs a U-Net")
    l1 = l1_loss(sr, hr)
    parts = {"l1": l1.item()}
    total = l1 * spec.alpha
    if spec.needs_unet and spec.lam > 0:
        lu = perceptual(spec.variant, sr, hr, unet)
        parts["perceptual"] = lu.item()
        total = total + lu * spec.lam
    parts["total"] = total.item()
    return total, parts


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def psnr(sr: np.ndarray, hr: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); ``inf`` for identical images."""
    sr, hr = np.asarray(sr, dtype=np.float64), np.asarray(hr, dtype=np.float64)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    mse = np.mean((sr - hr) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t * t) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(sr: np.ndarray, hr: np.ndarray, peak: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all valid Gaussian-weighted windows of a 2-D image (or channel-mean)."""
    x, y = np.asarray(sr, dtype=np.float64), np.asarray(hr, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim > 2:
        flat_x = x.reshape(-1, *x.shape[-2:])
        flat_y = y.reshape(-1, *y.shape[-2:])
        return float(np.mean([ssim(a, b, peak, win_size, sigma) for a, b in zip(flat_x, flat_y)]))
    if min(x.shape) < win_size:
        raise ValueError(f"image {x.shape} smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2

    def filt(a):
        return ndimage.correlate(a, w, mode="constant")[_valid(a.shape, win_size)]

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def _valid(shape, k):
    lo = k // 2
    hi_off = k - 1 - lo
    return tuple(slice(lo, n - hi_off) for n in shape)


def region_dice(pred: np.ndarray, gt: np.ndarray, region, num_classes: int, eps: float = DICE_EPS) -> float:
    """Dice after binarising both label maps by membership in ``region``."""
    region = list(region)
    for c in region:
        if not 0 <= c < num_classes:
            raise ValueError(f"unknown class index {c}")
    for lab in (pred, gt):
        if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
            raise ValueError("label map contains an unknown class index")
    return dice_coefficient(np.isin(pred, region), np.isin(gt, region), eps)


def region_sets(num_classes: int) -> dict[str, list[int]]:
    """"T" is every foreground class; each foreground class is also its own region."""
    regions = {"T": list(range(1, num_classes))}
    for c in range(1, num_classes):
        regions[f"C{c}"] = [c]
    return regions


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------


@dataclass
class FpsReport:
    fps: float  # total frames / total elapsed
    median_fps: float
    spread: float  # interquartile range of per-run fps
    frames_per_run: int
    runs: list = field(default_factory=list)  # seconds per run

    def to_dict(self) -> dict:
        return {"fps": self.fps, "median_fps": self.median_fps, "spread": self.spread,
                "frames_per_run": self.frames_per_run, "runs": list(self.runs)}


def measure_fps(model, input_shape, warmup: int = 1, iters: int = 5, clock=time.perf_counter) -> FpsReport:
    """Wall-clock inference throughput, non-finite checks disabled."""
    if iters < 1:
        raise ValueError("iters must be at least 1")
    dtype = getattr(getattr(model, "params", None), "dtype", np.float32)
    x = Tensor(np.random.default_rng(0).random(tuple(input_shape)).astype(dtype))
    frames = int(input_shape[0])
    times = []
    with T.no_grad(), T.debug_mode(False):
        for _ in range(warmup):
            model(x)
        for _ in range(iters):
            t0 = clock()
            model(x)
            times.append(clock() - t0)
    rates = [frames / max(t, 1e-12) for t in times]
    q = np.percentile(rates, [25, 75]) if len(rates) > 1 else (rates[0], rates[0])
    return FpsReport(fps=iters * frames / max(sum(times), 1e-12), median_fps=statistics.median(rates),
                     spread=float(q[1] - q[0]), frames_per_run=frames, runs=times)


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # one dict per image: id, psnr, ssim, dice.<region>
    extras: dict = field(default_factory=dict)  # cost/fps figures, optional external FID

    def metrics(self) -> list[str]:
        keys = []
        for r in self.rows:
            for k in r:
                if k != "id" and k not in keys:
                    keys.append(k)
        return keys

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """Metric -> (mean, std); infinite PSNR enters as the cap."""
        out = {}
        for k in self.metrics():
            vals = np.array([_capped(r[k]) for r in self.rows if k in r], dtype=np.float64)
            out[k] = (float(vals.mean()), float(vals.std()))
        return out

    def to_text(self) -> str:
        lines = ["metric\tmean\tstd"]
        for k, (m, s) in self.aggregate().items():
            lines.append(f"{k}\t{m:.6f}\t{s:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        def enc(v):
            return "inf" if isinstance(v, float) and math.isinf(v) else v

        payload = {"rows": [{k: enc(v) for k, v in r.items()} for r in self.rows],
                   "aggregate": {k: {"mean": m, "std": s} for k, (m, s) in self.aggregate().items()},
                   "extras": self.extras}
        return json.dumps(payload, indent=1, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        rows = [{k: (math.inf if v == "inf" else v) for k, v in r.items()} for r in obj["rows"]]
        return cls(rows, obj.get("extras", {}))


def _capped(v: float) -> float:
    return PSNR_CAP if math.isinf(v) else float(v)
