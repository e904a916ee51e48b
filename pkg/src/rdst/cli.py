"""Command-line entry point.

Every subcommand reads one optional ``--config`` file of ``key = value`` lines;
namespaced keys may be overridden with ``--key=value`` (e.g. ``--model.width=24``).
Exit status: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import DEFAULTS, Config, ConfigError, describe_keys

log = logging.getLogger("rdst")

COMMANDS = ("gen-data", "train", "finetune", "seg-train", "eval", "infer", "cost", "bench-fps")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> _Parser:
    p = _Parser(prog="rdst", description="RDST super-resolution toolkit",
                epilog="config keys:\n" + describe_keys(),
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="plain-text key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path (dataset root, run dir or image)")
    p.add_argument("--in", dest="inp", help="input image (infer)")
    p.add_argument("--ckpt", help="RDST checkpoint")
    p.add_argument("--unet", help="U-Net checkpoint")
    p.add_argument("--data", help="dataset root (overrides data.root)")
    p.add_argument("--model", help="rdst or rdst-e (overrides model.kind)")
    p.add_argument("--scale", type=int)
    p.add_argument("--input", help="input shape NxCxHxW (cost, bench-fps)")
    p.add_argument("--resume", help="resume stage-1 training from this checkpoint")
    p.add_argument("--csv", help="also write the cost table as CSV here")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_args(argv):
    """Split argv into named flags and namespaced ``--key=value`` overrides."""
    named, overrides = [], {}
    for arg in argv:
        if arg.startswith("--") and "=" in arg:
            key, value = arg[2:].split("=", 1)
            if key in DEFAULTS and "." in key:
                overrides[key] = value
                continue
        named.append(arg)
    args = _parser().parse_args(named)
    cfg = Config.load(args.config, overrides)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.data:
        cfg.set("data.root", args.data)
    if args.model:
        cfg.set("model.kind", args.model)
    if args.scale:
        cfg.set("model.scale", args.scale)
    if args.command in ("train", "finetune", "seg-train", "eval") and args.out:
        cfg.set("run.dir", args.out)
    return args, cfg


def parse_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"bad shape {text!r}; expected e.g. 1x1x40x32") from exc
    if len(shape) != 4 or min(shape) < 1:
        raise UsageError(f"shape {text!r} must have four positive extents")
    return shape


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------


def model_config(cfg: Config):
    from .model import RdstConfig

    kind = cfg["model.kind"].lower()
    if kind not in ("rdst", "rdst-e"):
        raise ConfigError(f"model.kind must be rdst or rdst-e, not {kind!r}")
    n = cfg["model.n_rdstb"] or (8 if kind == "rdst" else 4)
    return RdstConfig(scale=cfg["model.scale"], width=cfg["model.width"], growth=cfg["model.growth"],
                      window=cfg["model.window"], heads=cfg["model.heads"], n_rdstb=n,
                      dstb_per_rdstb=cfg["model.dstb_per_rdstb"], stl_per_dstb=cfg["model.stl_per_dstb"],
                      in_channels=cfg["model.channels"], out_channels=cfg["model.channels"],
                      mlp_ratio=cfg["model.mlp_ratio"], use_rel_pos_bias=cfg["model.rel_pos_bias"],
                      use_gff=cfg["model.gff"], upsampler=cfg["model.upsampler"])


def train_plan(cfg: Config):
    from .train import TrainPlan

    return TrainPlan(stage1_steps=cfg["train.stage1.steps"], stage1_lr=cfg["train.stage1.lr"],
                     stage2_steps=cfg["train.stage2.steps"], stage2_lr=cfg["train.stage2.lr"],
                     milestones=cfg.floats("train.stage2.milestones"), batch=cfg["train.batch"],
                     hr_patch=cfg["data.hr_patch"], sigma=cfg["data.sigma"], alpha=cfg["loss.alpha"],
                     lam=cfg["loss.lam"], variant=cfg["loss.variant"], seed=cfg["seed"],
                     val_every=cfg["train.val_every"], val_count=cfg["train.val_count"],
                     checkpoint_every=cfg["train.checkpoint_every"])


def unet_config(cfg: Config):
    from .unet import UNetConfig

    return UNetConfig(in_channels=cfg["model.channels"], classes=cfg["unet.classes"],
                      base_width=cfg["unet.base_width"], levels=cfg["unet.levels"])


def _split(cfg: Config, name: str):
    from .data import Dataset

    return Dataset.load(Path(cfg["data.root"]) / name)


def _optional_split(cfg: Config, name: str):
    path = Path(cfg["data.root"]) / name
    return _split(cfg, name) if (path / "manifest.txt").exists() else None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: Config) -> int:
    from .data import PhantomSpec, generate_phantoms

    root = Path(args.out or cfg["data.root"])
    side = cfg["data.canvas"]
    seed = cfg["seed"]
    # independent generator streams per split
    for offset, (split, count) in enumerate((("train", cfg["data.count"]), ("val", cfg["data.val_count"]),
                                             ("test", cfg["data.test_count"]))):
        if count > 0:
            spec = PhantomSpec(canvas=(side, side), seed=seed * 1000 + offset)
            generate_phantoms(spec, count, root, split)
            print(f"{split}: {count} phantoms -> {root / split}")
    return 0


def _write_config_snapshot(cfg: Config, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.dump())


def cmd_train(args, cfg: Config) -> int:
    from .train import train_stage1

    run = Path(cfg["run.dir"])
    _write_config_snapshot(cfg, run)
    path = train_stage1(train_plan(cfg), _split(cfg, "train"), model_config(cfg), run,
                        resume=args.resume, val_dataset=_optional_split(cfg, "val"))
    print(f"stage-1 checkpoint: {path}")
    return 0


def cmd_finetune(args, cfg: Config) -> int:
    from .train import finetune_stage2
    from .unet import UNet

    run = Path(cfg["run.dir"])
    ckpt = args.ckpt or run / "stage1.ckpt"
    unet = UNet.load(args.unet) if args.unet else None
    _write_config_snapshot(cfg, run)
    path = finetune_stage2(train_plan(cfg), _split(cfg, "train"), ckpt, unet, run,
                           val_dataset=_optional_split(cfg, "val"))
    print(f"stage-2 checkpoint: {path}")
    return 0


def cmd_seg_train(args, cfg: Config) -> int:
    from .unet import UNetSchedule, train_unet

    run = Path(cfg["run.dir"])
    _write_config_snapshot(cfg, run)
    out = run / "unet.ckpt"
    sched = UNetSchedule(steps=cfg["unet.steps"], lr=cfg["unet.lr"], milestones=cfg.floats("unet.milestones"),
                         batch=cfg["unet.batch"], seed=cfg["seed"])
    curve: list[float] = []
    train_unet(_split(cfg, "train"), unet_config(cfg), sched, out, curve=curve)
    (run / "unet.curve.txt").write_text("".join(f"{v:.6f}\n" for v in curve))
    print(f"U-Net checkpoint: {out}")
    return 0


def cmd_eval(args, cfg: Config) -> int:
    from .model import RdstModel
    from .train import BicubicModel, evaluate
    from .unet import UNet

    model = RdstModel.load(args.ckpt) if args.ckpt else BicubicModel(cfg["model.scale"])
    unet = UNet.load(args.unet) if args.unet else None
    out = Path(cfg["run.dir"]) / "eval"
    rep = evaluate(model, _split(cfg, cfg["eval.split"]), unet, sigma=cfg["data.sigma"],
                   seed=cfg["seed"], out_dir=out, grids=cfg["eval.grids"])
    sys.stdout.write(rep.to_text())
    return 0


def cmd_infer(args, cfg: Config) -> int:
    from .data import bicubic_upsample, read_png, write_png
    from .model import RdstModel

    if not args.inp or not args.out:
        raise UsageError("infer needs --in and --out")
    lr = read_png(args.inp)[None, None]
    if args.ckpt:
        model = RdstModel.load(args.ckpt)
        if args.scale and args.scale != model.scale:
            raise RuntimeError(f"checkpoint scale {model.scale} != --scale {args.scale}")
        sr = model.infer(lr)
    else:
        log.warning("no --ckpt given; falling back to bicubic upsampling")
        sr = np.clip(bicubic_upsample(lr, cfg["model.scale"]), 0, 1)
    write_png(args.out, sr[0, 0])
    print(f"{args.out}: {sr.shape[-2]}x{sr.shape[-1]}")
    return 0


def cmd_cost(args, cfg: Config) -> int:
    from .model import rdst_cost

    shape = parse_shape(args.input or "1x1x40x32")
    rep = rdst_cost(model_config(cfg), shape)
    print(rep.grouped(2).to_table())
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    return 0


def cmd_bench_fps(args, cfg: Config) -> int:
    from .losses import measure_fps
    from .model import RdstModel

    shape = parse_shape(args.input or "1x1x40x32")
    model = RdstModel.load(args.ckpt) if args.ckpt else RdstModel(model_config(cfg), seed=cfg["seed"])
    rep = measure_fps(model, shape, warmup=cfg["bench.warmup"], iters=cfg["bench.iters"])
    print(json.dumps(rep.to_dict(), indent=1))
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "finetune": cmd_finetune,
            "seg-train": cmd_seg_train, "eval": cmd_eval, "infer": cmd_infer,
            "cost": cmd_cost, "bench-fps": cmd_bench_fps}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, cfg = parse_args(argv)
    except (UsageError, ConfigError) as exc:
        print(f"rdst: usage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"rdst: cannot read config: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"rdst: usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"rdst: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
