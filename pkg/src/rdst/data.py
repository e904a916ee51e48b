"""HR-LR pair generation, patch sampling, synthetic phantoms and the on-disk dataset layout."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import load_tensor, save_tensor

DEFAULT_SIGMA = 0.01


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel (a = -0.5 is Catmull-Rom)."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """Dense [n_out, n_in] bicubic resampling matrix with symmetric borders.

    Downscaling widens the kernel by the scale factor (anti-alias prefilter).
    Rows sum to one.
    """
    scale = n_out / n_in
    width = 4.0
    if scale < 1 and antialias:
        width /= scale
        kern = lambda t: scale * cubic(scale * t)  # noqa: E731
    else:
        kern = cubic
    x = np.arange(1, n_out + 1) / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(x - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kern(x[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    # symmetric (half-sample) boundary: 1..n, n..1, repeated
    mirror = np.concatenate([np.arange(n_in), np.arange(n_in)[::-1]])
    src = mirror[np.mod(idx.astype(np.int64) - 1, 2 * n_in)]
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(mat, (rows, src.reshape(-1)), w.reshape(-1))
    return mat


def imresize(img: np.ndarray, out_hw: tuple[int, int], antialias: bool = True) -> np.ndarray:
    """Separable bicubic resize of the last two axes."""
    H, W = img.shape[-2:]
    ry = resize_matrix(H, out_hw[0], antialias)
    rx = resize_matrix(W, out_hw[1], antialias)
    out = np.einsum("oh,...hw,pw->...op", ry, img.astype(np.float64), rx, optimize=True)
    return out.astype(img.dtype if img.dtype in (np.float32, np.float64) else np.float64)


def degrade(hr: np.ndarray, scale: int, sigma: float = DEFAULT_SIGMA, rng=None,
            clip: bool = True) -> np.ndarray:
    """Bicubic anti-aliased downsample by ``scale``, add N(0, sigma^2), clamp to [0, 1]."""
    H, W = hr.shape[-2:]
    if H % scale or W % scale:
        raise ValueError(f"HR extents {H}x{W} not divisible by scale {scale}")
    lr = imresize(hr, (H // scale, W // scale))
    if sigma > 0:
        rng = np.random.default_rng(rng)
        lr = lr + rng.normal(0.0, sigma, size=lr.shape).astype(lr.dtype)
    if clip:
        lr = np.clip(lr, 0.0, 1.0)
    return lr


def bicubic_upsample(lr: np.ndarray, scale: int) -> np.ndarray:
    H, W = lr.shape[-2:]
    return imresize(lr, (H * scale, W * scale))


# ---------------------------------------------------------------------------
# samples and patches
# ---------------------------------------------------------------------------


@dataclass
class SrSample:
    hr: np.ndarray  # [C, sH, sW]
    lr: np.ndarray  # [C, H, W]
    label: np.ndarray | None = None  # [sH, sW] integer classes
    ident: str = ""

    def __post_init__(self):
        s_h = self.hr.shape[-2] / self.lr.shape[-2]
        s_w = self.hr.shape[-1] / self.lr.shape[-1]
        if s_h != s_w or s_h != int(s_h):
            raise ValueError("HR extents must be an integer multiple of LR extents")
        if self.label is not None and self.label.shape != self.hr.shape[-2:]:
            raise ValueError("label map must align with the HR image")

    @property
    def scale(self) -> int:
        return int(self.hr.shape[-2] // self.lr.shape[-2])


def make_sample(hr: np.ndarray, scale: int, sigma: float, rng, label=None, ident="") -> SrSample:
    return SrSample(hr=hr, lr=degrade(hr, scale, sigma, rng).astype(hr.dtype), label=label, ident=ident)


def aligned_offset(hr_offset: tuple[int, int], scale: int) -> tuple[int, int]:
    y, x = hr_offset
    if y % scale or x % scale:
        raise ValueError("HR offsets must be multiples of the scale")
    return y // scale, x // scale


def valid_offsets(hr_hw: tuple[int, int], hr_patch: int, scale: int) -> list[tuple[int, int]]:
    H, W = hr_hw
    return [(y, x) for y in range(0, H - hr_patch + 1, scale) for x in range(0, W - hr_patch + 1, scale)]


def sample_patches(sample: SrSample, hr_patch: int = 96, scale: int | None = None, rng=None):
    """Aligned random crop: returns (lr_patch, hr_patch, label_patch, hr_offset)."""
    s = sample.scale if scale is None else scale
    if s != sample.scale:
        raise ValueError(f"sample scale {sample.scale} != requested {s}")
    if hr_patch % s:
        raise ValueError("HR patch size must be divisible by the scale")
    H, W = sample.hr.shape[-2:]
    if H < hr_patch or W < hr_patch:
        raise ValueError(f"image {H}x{W} smaller than patch {hr_patch}")
    rng = np.random.default_rng(rng)
    y = int(rng.integers(0, (H - hr_patch) // s + 1)) * s
    x = int(rng.integers(0, (W - hr_patch) // s + 1)) * s
    ly, lx = aligned_offset((y, x), s)
    lp = hr_patch // s
    hr = sample.hr[..., y:y + hr_patch, x:x + hr_patch]
    lr = sample.lr[..., ly:ly + lp, lx:lx + lp]
    lbl = None if sample.label is None else sample.label[y:y + hr_patch, x:x + hr_patch]
    return lr, hr, lbl, (y, x)


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    """Nested-ellipse "tissue" phantoms: background, body, inner structures, small lesions."""

    canvas: tuple[int, int] = (96, 96)
    body_radius: tuple[float, float] = (0.32, 0.46)  # fraction of canvas
    inner_count: tuple[int, int] = (1, 3)
    inner_radius: tuple[float, float] = (0.08, 0.2)
    lesion_count: tuple[int, int] = (2, 5)
    lesion_radius: tuple[float, float] = (0.025, 0.07)
    intensity: tuple = ((0.0, 0.05), (0.35, 0.5), (0.6, 0.75), (0.85, 1.0))
    texture: float = 0.04
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.intensity)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("phantoms need at least two classes")
        if min(self.canvas) < 8:
            raise ValueError("canvas too small")
        if not 0 < self.body_radius[0] <= self.body_radius[1] <= 0.5:
            raise ValueError("body radius must fit in the canvas")
        for lo, hi in self.intensity:
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("intensity bands must lie in [0, 1]")


def _ellipse(shape, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (image [1,H,W] float32 in [0,1], label [H,W] int) pair."""
    H, W = spec.canvas
    n = min(H, W)
    label = np.zeros((H, W), dtype=np.int64)
    ry = rng.uniform(*spec.body_radius) * n
    rx = rng.uniform(*spec.body_radius) * n
    cy = H / 2 + rng.uniform(-0.04, 0.04) * n
    cx = W / 2 + rng.uniform(-0.04, 0.04) * n
    body = _ellipse((H, W), cy, cx, ry, rx, rng.uniform(0, math.pi))
    label[body] = 1

    def inside_point(margin):
        for _ in range(100):
            t = rng.uniform(0, 2 * math.pi)
            r = math.sqrt(rng.uniform(0, 1)) * max(0.0, 1 - margin)
            py, px = cy + r * ry * math.sin(t), cx + r * rx * math.cos(t)
            if 0 <= py < H and 0 <= px < W and body[int(py), int(px)]:
                return py, px
        return cy, cx

    top = spec.num_classes - 1
    for _ in range(int(rng.integers(spec.inner_count[0], spec.inner_count[1] + 1))):
        r1, r2 = (rng.uniform(*spec.inner_radius) * n for _ in range(2))
        py, px = inside_point(0.5)
        m = _ellipse((H, W), py, px, r1, r2, rng.uniform(0, math.pi)) & body
        label[m] = min(2, top)
    if top >= 3:
        for _ in range(int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))):
            r1, r2 = (max(1.0, rng.uniform(*spec.lesion_radius) * n) for _ in range(2))
            py, px = inside_point(0.3)
            m = _ellipse((H, W), py, px, r1, r2, rng.uniform(0, math.pi)) & body
            label[m] = 3
    levels = np.array([rng.uniform(lo, hi) for lo, hi in spec.intensity])
    img = levels[label]
    if spec.texture > 0:
        fine = ndimage.gaussian_filter(rng.standard_normal((H, W)), 1.0)
        coarse = ndimage.gaussian_filter(rng.standard_normal((H, W)), 4.0)
        tex = fine / (fine.std() + 1e-12) + coarse / (coarse.std() + 1e-12)
        img = img + spec.texture * 0.5 * tex * (label > 0)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img[None], label


def generate_phantoms(spec: PhantomSpec, count: int, out_dir=None, split: str = "train"):
    """Generate ``count`` phantoms; write ``out_dir/split`` when given. Returns a Dataset."""
    spec.validate()
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(spec.seed)
    imgs, lbls = [], []
    for _ in range(count):
        img, lbl = generate_phantom(spec, rng)
        imgs.append(img)
        lbls.append(lbl)
    ds = Dataset(np.stack(imgs), np.stack(lbls), classes=list(range(spec.num_classes)),
                 meta={"generator": "phantom", "seed": str(spec.seed),
                       "canvas": f"{spec.canvas[0]}x{spec.canvas[1]}"})
    if out_dir is not None:
        ds.save(Path(out_dir) / split)
    return ds


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    hr: np.ndarray  # [n, C, H, W] float32
    labels: np.ndarray | None = None  # [n, H, W] int64
    classes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.hr)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        lbl = None if self.labels is None else self.labels[idx]
        return dataclasses.replace(self, hr=self.hr[idx], labels=lbl)

    def save(self, root) -> None:
        root = Path(root)
        (root / "hr").mkdir(parents=True, exist_ok=True)
        if self.labels is not None:
            (root / "lbl").mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.hr):
            save_tensor(root / "hr" / f"{i:04d}.rdt", img.astype(np.float32))
            if self.labels is not None:
                save_tensor(root / "lbl" / f"{i:04d}.rdt", self.labels[i].astype(np.float32))
        lines = [f"count = {len(self)}",
                 f"shape = {'x'.join(map(str, self.hr.shape[1:]))}",
                 f"classes = {','.join(map(str, self.classes))}",
                 f"labels = {'yes' if self.labels is not None else 'no'}"]
        lines += [f"{k} = {v}" for k, v in self.meta.items()]
        (root / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        manifest = root / "manifest.txt"
        if not manifest.exists():
            raise FileNotFoundError(f"{root}: missing manifest.txt")
        meta = read_kv(manifest.read_text())
        n = int(meta.pop("count"))
        if n < 1:
            raise ValueError(f"{root}: empty dataset")
        meta.pop("shape", None)
        classes = [int(c) for c in meta.pop("classes", "").split(",") if c.strip()]
        has_labels = meta.pop("labels", "no") == "yes"
        hr = np.stack([load_tensor(root / "hr" / f"{i:04d}.rdt") for i in range(n)])
        labels = None
        if has_labels:
            labels = np.stack([load_tensor(root / "lbl" / f"{i:04d}.rdt") for i in range(n)]).astype(np.int64)
        return cls(hr.astype(np.float32), labels, classes, meta)


def read_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed line {line!r}; expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# PNG import / export
# ---------------------------------------------------------------------------


def read_png(path) -> np.ndarray:
    """Grayscale PNG (8 or 16 bit) -> float32 [H, W] in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            peak = 255.0
    return (arr / peak).astype(np.float32)


def write_png(path, img: np.ndarray, bits: int = 8) -> None:
    """Write [H,W] grayscale or [H,W,3] RGB values in [0,1]."""
    from PIL import Image

    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 16 and img.ndim == 2:
        Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)
