"""Two-stage training (L1, then perceptual fine-tuning), evaluation and comparison grids."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import tensor as T
from .data import Dataset, bicubic_upsample, degrade, write_png
from .io import file_digest
from .losses import EvalReport, LossSpec, combined_loss, psnr, region_dice, region_sets, ssim
from .model import RdstConfig, RdstModel, load_model, rdst_forward
from .nn import ParamStore
from .optim import AdamState, adam_step
from .tensor import Tensor
from .unet import UNet

log = logging.getLogger(__name__)

STAGE1, STAGE2 = 1, 2


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainPlan:
    stage1_steps: int = 2000
    stage1_lr: float = 2e-4
    stage2_steps: int = 500
    stage2_lr: float = 1e-4
    milestones: tuple = (0.5, 0.75, 0.875)
    batch: int = 32
    hr_patch: int = 96
    sigma: float = 0.01
    alpha: float = 1.0
    lam: float = 10.0
    variant: str = "E1"
    seed: int = 0
    val_every: float = 0.05
    val_count: int = 8
    checkpoint_every: int = 0

    def __post_init__(self):
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if any(not 0 < m < 1 for m in ms):
            raise ValueError("milestones are fractions of the stage length in (0, 1)")

    def steps(self, stage: int) -> int:
        return self.stage1_steps if stage == STAGE1 else self.stage2_steps

    def milestone_steps(self) -> list[int]:
        return [int(round(m * self.stage2_steps)) for m in self.milestones]

    def lr_at(self, stage: int, step: int) -> float:
        """Stage 1: constant. Stage 2: halved at every milestone already reached."""
        if stage == STAGE1:
            return self.stage1_lr
        return self.stage2_lr * 0.5 ** sum(1 for m in self.milestone_steps() if step >= m)

    def loss_spec(self, stage: int) -> LossSpec:
        if stage == STAGE1:
            return LossSpec(alpha=1.0, lam=0.0, variant="none")
        return LossSpec(alpha=self.alpha, lam=self.lam, variant=self.variant)


class RunLog:
    """Append-only JSON-lines log; wall-clock goes to a separate timing file."""

    def __init__(self, path, timing_path=None):
        self.path = Path(path)
        self.timing_path = Path(timing_path) if timing_path else self.path.with_suffix(".timing.jsonl")
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        with self.path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def time(self, record: dict) -> None:
        with self.timing_path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def make_batch(dataset: Dataset, plan: TrainPlan, scale: int, stage: int, step: int):
    """Deterministic (lr, hr) batch for one step; drawn from (seed, stage, step) alone."""
    rng = np.random.default_rng([plan.seed, stage, step])
    n = len(dataset)
    idx = rng.integers(0, n, size=plan.batch)
    p = plan.hr_patch
    lrs, hrs = [], []
    for i in idx:
        img = dataset.hr[i]
        H, W = img.shape[-2:]
        if H < p or W < p:
            raise TrainingError(f"image {i} ({H}x{W}) smaller than the {p}px patch")
        y = int(rng.integers(0, (H - p) // scale + 1)) * scale
        x = int(rng.integers(0, (W - p) // scale + 1)) * scale
        hr = img[:, y:y + p, x:x + p]
        hrs.append(hr)
        lrs.append(degrade(hr, scale, plan.sigma, rng))
    return np.stack(lrs).astype(np.float32), np.stack(hrs).astype(np.float32)


def validation_set(dataset: Dataset, plan: TrainPlan, scale: int):
    count = min(plan.val_count, len(dataset))
    rng = np.random.default_rng([plan.seed, 99])
    hr = dataset.hr[:count].astype(np.float32)
    lr = np.stack([degrade(h, scale, plan.sigma, rng) for h in hr]).astype(np.float32)
    return lr, hr


def _mean_psnr(model: RdstModel, lr, hr) -> float:
    sr = model.infer(lr)
    return float(np.mean([min(psnr(a, b), 100.0) for a, b in zip(sr, hr)]))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def run_stage(stage: int, plan: TrainPlan, dataset: Dataset, model: RdstModel, out_dir,
              unet: UNet | None = None, state: AdamState | None = None, start_step: int = 0,
              stop_at: int | None = None, val_dataset: Dataset | None = None) -> Path:
    """Optimise ``model`` for one stage; returns the final checkpoint path."""
    if dataset is None or len(dataset) == 0:
        raise TrainingError("empty dataset")
    spec = plan.loss_spec(stage)
    if spec.needs_unet and spec.lam > 0 and unet is None:
        raise TrainingError(f"loss variant {spec.variant} needs a frozen U-Net checkpoint")
    if unet is not None:
        unet.params.freeze()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"stage{stage}"
    runlog = RunLog(out / f"{tag}.runlog.jsonl")
    if start_step == 0:
        runlog.append({"event": "config", "stage": stage, "plan": asdict(plan),
                       "model": model.config.to_meta("")})
    state = state or AdamState()
    total = plan.steps(stage)
    end = total if stop_at is None else min(stop_at, total)
    scale = model.scale
    val = validation_set(val_dataset or dataset, plan, scale)
    cadence = max(1, int(round(plan.val_every * total)))
    best = -math.inf
    for r in runlog.records():
        if r.get("event") == "val" and r.get("stage") == stage and r["step"] < start_step:
            best = max(best, r["val_psnr"])
    params = model.params
    for step in range(start_step, end):
        t0 = time.perf_counter()
        lr_img, hr_img = make_batch(dataset, plan, scale, stage, step)
        params.zero_grad()
        try:
            sr = rdst_forward(Tensor(lr_img), params, model.config)
            loss, parts = combined_loss(spec, sr, hr_img, unet)
        except FloatingPointError as exc:
            raise TrainingError(f"{tag} step {step}: non-finite values in the forward pass ({exc})") from exc
        if not math.isfinite(parts["total"]):
            raise TrainingError(f"{tag} step {step}: loss is not finite")
        loss.backward()
        lr = plan.lr_at(stage, step)
        adam_step(params, lr, state)
        runlog.append({"event": "step", "stage": stage, "step": step, "lr": lr, **parts})
        runlog.time({"stage": stage, "step": step, "seconds": time.perf_counter() - t0})
        done = step + 1
        if done % cadence == 0 or done == total:
            score = _mean_psnr(model, *val)
            runlog.append({"event": "val", "stage": stage, "step": done, "val_psnr": score})
            if score > best:
                best = score
                save_training_checkpoint(out / f"{tag}.best.ckpt", model, state, stage, done)
        if plan.checkpoint_every and done % plan.checkpoint_every == 0 and done < end:
            save_training_checkpoint(out / f"{tag}.last.ckpt", model, state, stage, done)
    final = out / (f"{tag}.ckpt" if end == total else f"{tag}.last.ckpt")
    save_training_checkpoint(final, model, state, stage, end)
    return final


def save_training_checkpoint(path, model: RdstModel, state: AdamState, stage: int, step: int) -> None:
    model.save(path, extra={f"adam.{k}": v for k, v in state.arrays().items()},
               meta={"stage": str(stage), "step": str(step)})


def load_training_checkpoint(path):
    cfg, params, extra, meta = load_model(path)
    adam = {k[5:]: v for k, v in extra.items() if k.startswith("adam.")}
    state = AdamState.from_arrays(adam) if adam else AdamState()
    return RdstModel(cfg, params), state, int(meta.get("stage", 1)), int(meta.get("step", 0))


def train_stage1(plan: TrainPlan, dataset: Dataset, config: RdstConfig, out_dir,
                 resume=None, stop_at=None, val_dataset=None) -> Path:
    """L1-only training from Kaiming init (or resumed from a stage-1 checkpoint)."""
    if resume is not None:
        model, state, stage, step = load_training_checkpoint(resume)
        if stage != STAGE1:
            raise TrainingError(f"{resume} is not a stage-1 checkpoint")
        if model.config != config:
            raise TrainingError("resume checkpoint was trained with a different model config")
    else:
        model, state, step = RdstModel(config, seed=plan.seed), AdamState(), 0
    return run_stage(STAGE1, plan, dataset, model, out_dir, state=state, start_step=step,
                     stop_at=stop_at, val_dataset=val_dataset)


def finetune_stage2(plan: TrainPlan, dataset: Dataset, rdst_ckpt, unet: UNet | None, out_dir,
                    val_dataset=None) -> Path:
    """Fine-tune a stage-1 model with alpha * L1 + lambda * L_U; the U-Net stays frozen."""
    model, _, _, _ = load_training_checkpoint(rdst_ckpt)
    return run_stage(STAGE2, plan, dataset, model, out_dir, unet=unet, state=AdamState(),
                     val_dataset=val_dataset)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


class SrModel(Protocol):
    """Anything that maps LR [N,C,H,W] arrays to SR arrays at a fixed scale."""

    scale: int

    def infer(self, lr: np.ndarray) -> np.ndarray: ...


class BicubicModel:
    def __init__(self, scale: int):
        self.scale = scale

    def infer(self, lr: np.ndarray) -> np.ndarray:
        return np.clip(bicubic_upsample(np.asarray(lr), self.scale), 0.0, 1.0).astype(np.float32)


class IdentityModel:
    """Returns the HR image itself (for reference rows)."""

    def __init__(self, hr: np.ndarray, scale: int):
        self.hr, self.scale, self._i = hr, scale, 0

    def infer(self, lr: np.ndarray) -> np.ndarray:
        out = self.hr[self._i:self._i + len(lr)]
        self._i += len(lr)
        return out


def eval_inputs(dataset: Dataset, scale: int, sigma: float, seed: int) -> np.ndarray:
    """LR inputs of an evaluation split; noise stream fixed per (seed, image index)."""
    return np.stack([degrade(h, scale, sigma, np.random.default_rng([seed, 7, i]))
                     for i, h in enumerate(dataset.hr)]).astype(np.float32)


def score_images(sr: np.ndarray, dataset: Dataset, unet: UNet | None = None) -> EvalReport:
    rep = EvalReport()
    pred = unet.predict(sr) if unet is not None else None
    classes = dataset.num_classes or (unet.config.classes if unet else 0)
    regions = region_sets(classes)
    for i, (s, h) in enumerate(zip(sr, dataset.hr)):
        row = {"id": f"{i:04d}", "psnr": psnr(s, h), "ssim": ssim(s, h)}
        if pred is not None and dataset.labels is not None:
            for name, reg in regions.items():
                row[f"dice.{name}"] = region_dice(pred[i], dataset.labels[i], reg, classes)
        rep.rows.append(row)
    return rep


def evaluate(model: SrModel, dataset: Dataset, unet: UNet | None = None, sigma: float = 0.01,
             seed: int = 0, out_dir=None, grids: int = 4) -> EvalReport:
    """PSNR / SSIM / region dice of ``model`` on ``dataset``; bicubic and HR aggregates in extras."""
    H, W = dataset.hr.shape[-2:]
    if H % model.scale or W % model.scale:
        raise ValueError(f"evaluation images {H}x{W} incompatible with scale {model.scale}")
    lr = eval_inputs(dataset, model.scale, sigma, seed)
    sr = np.concatenate([model.infer(lr[i:i + 8]) for i in range(0, len(lr), 8)])
    report = score_images(sr, dataset, unet)
    bic = BicubicModel(model.scale).infer(lr)
    report.extras["bicubic"] = {k: list(v) for k, v in score_images(bic, dataset, unet).aggregate().items()}
    if unet is not None:
        ref = score_images(dataset.hr, dataset, unet).aggregate()
        report.extras["hr_reference"] = {k: list(v) for k, v in ref.items() if k.startswith("dice")}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(report.to_text())
        (out / "report.json").write_text(report.to_json())
        pred = unet.predict(sr[:grids]) if unet is not None else None
        for i in range(min(grids, len(sr))):
            p = None if pred is None else pred[i]
            lbl = None if dataset.labels is None else dataset.labels[i]
            write_png(out / f"grid_{i:04d}.png", comparison_grid(lr[i], bic[i], sr[i], dataset.hr[i], p, lbl))
    return report


ERROR_COLOR = (1.0, 0.0, 0.0)  # red: pixels whose predicted class differs from the ground truth


def comparison_grid(lr, bic, sr, hr, pred=None, label=None) -> np.ndarray:
    """[LR | bicubic | SR | HR | segmentation errors] as one RGB strip."""
    s = hr.shape[-1] // lr.shape[-1]
    tiles = [np.kron(lr[0], np.ones((s, s))), bic[0], sr[0], hr[0]]
    rgb = [np.repeat(np.clip(t, 0, 1)[..., None], 3, axis=-1) for t in tiles]
    overlay = rgb[2].copy()
    if pred is not None and label is not None:
        overlay[pred != label] = ERROR_COLOR
    rgb.append(overlay)
    sep = np.ones((hr.shape[-2], 2, 3))
    parts = []
    for t in rgb:
        parts += [t, sep]
    return np.concatenate(parts[:-1], axis=1)


def unet_digest(path) -> str:
    return file_digest(path)


def params_digest(params: ParamStore) -> str:
    import hashlib

    h = hashlib.sha256()
    for n, t in params.items():
        h.update(n.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
