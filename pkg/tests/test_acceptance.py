"""Acceptance suite: one group of checks per criterion, summarised at the end of the run.

Criterion 6 trains the tiny model for 2k steps (tens of minutes); deselect it with
``-m "not slow"`` for a quick pass.
"""

import hashlib
import itertools
import math
import time

import numpy as np
import pytest

from rdst import tensor as T
from rdst.cli import main
from rdst.data import PhantomSpec, generate_phantoms, write_png
from rdst.losses import psnr, region_dice, ssim
from rdst.model import RdstConfig, RdstModel, init_rdst, load_model, rdst_cost, rdstb_forward, save_model
from rdst.nn import ParamStore, conv2d, linear_layer, norm_layer, pixel_shuffle, pixel_unshuffle
from rdst.optim import AdamState, adam_step
from rdst.swin import (StlConfig, WindowGrid, _partition_tokens, attention_weights, cyclic_shift,
                       init_stl_pair, shifted_window_mask, stl_pair, window_msa, window_partition, window_reverse)
from rdst.tensor import Tensor
from rdst.train import (TrainPlan, evaluate, finetune_stage2, load_training_checkpoint, make_batch, params_digest,
                        train_stage1, unet_digest)
from rdst.losses import l1_loss
from rdst.model import rdst_forward
from rdst.unet import UNet, UNetConfig, UNetSchedule, dice_coefficient, train_unet

from gradcheck import CATALOG, TOL, run_entry
from oracles import attention_oracle, conv_oracle, dice_oracle, psnr_oracle, ssim_oracle


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


# -- 1, 2: calibration ---------------------------------------------------------


@pytest.mark.criterion(1)
def test_parameter_calibration(detail):
    for cfg, want in ((RdstConfig.rdst(), 4.40e6), (RdstConfig.rdst_e(), 2.35e6)):
        got = rdst_cost(cfg, (1, 1, 40, 32)).params
        detail.append(f"{got / 1e6:.3f}M vs {want / 1e6:.2f}M ({100 * (got / want - 1):+.1f}%)")
        assert abs(got / want - 1) <= 0.03


@pytest.mark.criterion(2)
def test_mac_calibration(detail):
    for cfg, want in ((RdstConfig.rdst(), 6.17e9), (RdstConfig.rdst_e(), 3.53e9)):
        t0 = time.perf_counter()
        got = rdst_cost(cfg, (1, 1, 40, 32)).macs
        assert time.perf_counter() - t0 < 1.0
        detail.append(f"{got / 1e9:.3f}G vs {want / 1e9:.2f}G ({100 * (got / want - 1):+.1f}%)")
        assert abs(got / want - 1) <= 0.10


# -- 3: gradients --------------------------------------------------------------


@pytest.mark.criterion(3)
def test_gradient_suite(detail):
    worst, worst_name, total = 0.0, "", 0
    failures = []
    for name in CATALOG:
        cases, err = run_entry(name)
        assert cases >= 100
        total += cases
        if err >= TOL:
            failures.append(f"{name}={err:.1e}")
        if err > worst:
            worst, worst_name = err, name
    detail.append(f"{len(CATALOG)} ops/layers/losses x 100 cases ({total}), worst rel. err {worst:.1e} ({worst_name})")
    assert not failures, failures


# -- 4: oracles ----------------------------------------------------------------


@pytest.mark.criterion(4)
def test_conv2d_oracle(detail):
    rng = np.random.default_rng(40)
    worst, count = 0.0, 0
    for H, W, k, stride in itertools.product(range(1, 6), range(1, 6), (1, 2, 3), (1, 2)):
        for pad in range(k):
            if H + 2 * pad < k or W + 2 * pad < k:
                continue
            x, w, b = rng.standard_normal((2, 2, H, W)), rng.standard_normal((3, 2, k, k)), rng.standard_normal(3)
            got = conv2d(t(x), t(w), t(b), stride=stride, pad=pad).data
            worst = max(worst, float(np.abs(got - conv_oracle(x, w, b, stride, pad)).max()))
            count += 1
    detail.append(f"conv2d {count} configs max|diff| {worst:.1e}")
    assert worst < 1e-10


def _bias_from_table(table, M):
    """[heads, T, T] bias built from token coordinates directly."""
    coords = [(i, j) for i in range(M) for j in range(M)]
    heads = table.shape[1]
    bias = np.zeros((heads, M * M, M * M))
    for a, (ya, xa) in enumerate(coords):
        for b, (yb, xb) in enumerate(coords):
            bias[:, a, b] = table[(ya - yb + M - 1) * (2 * M - 1) + (xa - xb + M - 1)]
    return bias


@pytest.mark.criterion(4)
def test_window_attention_oracle(detail):
    worst = 0.0
    for seed, (M, heads, shifted) in enumerate(itertools.product((2, 4), (1, 2), (False, True))):
        rng = np.random.default_rng(seed)
        cfg = StlConfig(dim=4 * heads, heads=heads, window=M)
        p = ParamStore(np.float64)
        init_stl_pair(p, "", cfg, rng)
        p["stl.0.relpos"].data[...] = rng.standard_normal(p["stl.0.relpos"].shape)
        grid = WindowGrid(M, (M // 2, M // 2) if shifted else (0, 0), 2 * M, 3 * M)
        mask = shifted_window_mask(grid)
        tokens = rng.standard_normal((2 * 6, M * M, cfg.dim))
        got = window_msa(t(tokens), p, "stl.0", cfg, mask).data
        qkv = linear_layer(p, "stl.0.qkv", t(tokens)).data
        att = attention_oracle(qkv, heads, _bias_from_table(p["stl.0.relpos"].data, M), mask)
        want = att @ p["stl.0.proj.weight"].data + p["stl.0.proj.bias"].data
        worst = max(worst, float(np.abs(got - want).max()))
    detail.append(f"window attention 8 configs max|diff| {worst:.1e}")
    assert worst < 1e-10


@pytest.mark.criterion(4)
def test_metric_oracles(detail):
    worst_p = worst_s = worst_d = 0.0
    for bits in itertools.product([0.0, 1.0], repeat=8):
        a, b = np.array(bits[:4]).reshape(2, 2), np.array(bits[4:]).reshape(2, 2)
        pa, po = psnr(a, b), psnr_oracle(a, b)
        assert (pa == po == math.inf) or abs(pa - po) < 1e-12
        if math.isfinite(po):
            worst_p = max(worst_p, abs(pa - po))
        worst_s = max(worst_s, abs(ssim(a, b, win_size=2) - ssim_oracle(a, b, 2, 1.5)))
        worst_d = max(worst_d, abs(dice_coefficient(a, b) - dice_oracle(a, b)),
                      abs(region_dice(a.astype(int), b.astype(int), [1], 2) - dice_oracle(a, b)))
    rng = np.random.default_rng(41)
    for _ in range(3):
        x = rng.random((16, 16))
        y = np.clip(x + 0.1 * rng.standard_normal((16, 16)), 0, 1)
        worst_s = max(worst_s, abs(ssim(x, y) - ssim_oracle(x, y)))
        worst_p = max(worst_p, abs(psnr(x, y) - psnr_oracle(x, y)))
        m1, m2 = rng.random((16, 16)) < 0.4, rng.random((16, 16)) < 0.6
        worst_d = max(worst_d, abs(dice_coefficient(m1, m2) - dice_oracle(m1, m2)))
    detail.append(f"PSNR {worst_p:.1e}, SSIM {worst_s:.1e}, dice {worst_d:.1e} (exhaustive 2x2 + random 16x16)")
    assert worst_p < 1e-12 and worst_s < 1e-8 and worst_d < 1e-15


# -- 5: structure --------------------------------------------------------------


@pytest.mark.criterion(5)
def test_structural_invariants(detail, tmp_path):
    rng = np.random.default_rng(50)
    # STL pair and RDSTB keep [N, C, H, W]
    for H, W, M in ((5, 7, 4), (8, 8, 4), (9, 4, 2), (16, 12, 8)):
        cfg = StlConfig(dim=12, heads=3, window=M)
        p = ParamStore(np.float64)
        init_stl_pair(p, "", cfg, rng)
        x = t(rng.standard_normal((2, 12, H, W)))
        assert stl_pair(x, p, "", cfg).shape == x.shape
        rc = RdstConfig(width=12, growth=6, heads=3, window=M, n_rdstb=1)
        with T.no_grad():
            assert rdstb_forward(x, init_rdst(rc, 0, np.float64), "body.0", rc).shape == x.shape
    # pixel shuffle and window partition round trips
    for r in (2, 3, 4):
        z = rng.standard_normal((2, 3 * r * r, 4, 5))
        assert np.array_equal(pixel_unshuffle(pixel_shuffle(t(z), r), r).data, z)
    for H, W, M in itertools.product((3, 8, 13), (5, 8, 16), (2, 4, 8)):
        x = rng.standard_normal((2, 3, H, W))
        grid = WindowGrid(M, (0, 0), H, W)
        assert np.array_equal(window_reverse(window_partition(t(x), grid), grid).data, x)
    # shifted-window mask: cross-region attention weight
    cfg = StlConfig(dim=6, heads=2, window=8)
    p = ParamStore(np.float64)
    init_stl_pair(p, "", cfg, rng)
    p["stl.1.relpos"].data[...] = 0.5 * rng.standard_normal(p["stl.1.relpos"].shape)
    worst = 0.0
    for H, W in ((16, 16), (13, 19), (8, 24), (24, 24)):
        grid = WindowGrid(8, (4, 4), H, W)
        padded = WindowGrid(8, (4, 4), *grid.padded)
        x = rng.standard_normal((2, *grid.padded, 6)) * 2
        rolled = cyclic_shift(norm_layer(p, "stl.1.ln1", t(x)), (4, 4), axes=(1, 2))
        mask = shifted_window_mask(padded)
        w = attention_weights(_partition_tokens(rolled, padded), p, "stl.1", cfg, mask)
        cross = np.broadcast_to(np.tile(mask != 0, (2, 1, 1))[:, None], w.shape)
        worst = max(worst, float(w[cross].max()))
    detail.append(f"max cross-region weight {worst:.1e}")
    assert worst < 1e-20
    # checkpoint round trip
    cfg = RdstConfig(width=12, growth=6, heads=6, n_rdstb=2, use_gff=True)
    params = init_rdst(cfg, 3)
    for n in params.names():
        params[n].data += rng.standard_normal(params[n].shape).astype(np.float32)
    save_model(tmp_path / "a.ckpt", cfg, params, meta={"step": "1"})
    cfg2, p2, _, meta = load_model(tmp_path / "a.ckpt")
    assert cfg2 == cfg and all(p2[n].data.tobytes() == params[n].data.tobytes() for n in params.names())
    save_model(tmp_path / "b.ckpt", cfg2, p2, meta=meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


# -- 6: desk-scale end-to-end ----------------------------------------------------

DESK_MODEL = RdstConfig(width=24, growth=12, n_rdstb=2)
DESK_PLAN = TrainPlan(stage1_steps=2000, stage1_lr=5e-4, batch=8, hr_patch=64, val_every=0.25, val_count=8)
DESK_UNET = UNetConfig(base_width=8, classes=4)
DESK_UNET_PLAN = UNetSchedule(steps=600, lr=3e-4, milestones=(), batch=4)


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_desk_scale_end_to_end(detail, tmp_path):
    start = time.perf_counter()
    data = generate_phantoms(PhantomSpec(canvas=(96, 96), seed=0), 200)
    train, test = data.subset(np.arange(160)), data.subset(np.arange(160, 200))
    with T.debug_mode(False):
        ckpt = train_stage1(DESK_PLAN, train, DESK_MODEL, tmp_path / "rdst")
        unet = UNet(DESK_UNET, train_unet(train, DESK_UNET, DESK_UNET_PLAN, tmp_path / "unet.ckpt").freeze())
        model, *_ = load_training_checkpoint(ckpt)
        rep = evaluate(model, test, unet, out_dir=tmp_path / "eval")
    minutes = (time.perf_counter() - start) / 60
    sr_psnr = rep.aggregate()["psnr"][0]
    bic_psnr = rep.extras["bicubic"]["psnr"][0]
    sr_dice = rep.aggregate()["dice.T"][0]
    bic_dice = rep.extras["bicubic"]["dice.T"][0]
    detail.append(f"PSNR SR {sr_psnr:.2f} dB vs bicubic {bic_psnr:.2f} dB ({sr_psnr - bic_psnr:+.2f} dB); "
                  f"whole-region dice SR {sr_dice:.4f} vs bicubic {bic_dice:.4f} "
                  f"(HR {rep.extras['hr_reference']['dice.T'][0]:.4f}); {minutes:.1f} min")
    assert sr_psnr - bic_psnr >= 1.0
    assert sr_dice > bic_dice
    assert minutes < 60


# -- 7: loss-variant wiring ----------------------------------------------------

TINY = RdstConfig(width=12, growth=6, heads=6, window=4, n_rdstb=1, dstb_per_rdstb=1)


def _tiny_plan(**kw):
    return TrainPlan(**{**dict(stage1_steps=4, stage2_steps=8, batch=2, hr_patch=16, val_every=0.5,
                               val_count=2), **kw})


@pytest.mark.criterion(7)
def test_loss_variant_wiring(detail, tmp_path):
    data = generate_phantoms(PhantomSpec(canvas=(16, 16), seed=70), 4)
    stage1 = train_stage1(_tiny_plan(), data, TINY, tmp_path / "s1")

    plan = _tiny_plan(lam=0.0)
    tuned = load_training_checkpoint(finetune_stage2(plan, data, stage1, None, tmp_path / "l0"))[0]
    model = load_training_checkpoint(stage1)[0]
    state = AdamState()
    for step in range(plan.stage2_steps):
        lr, hr = make_batch(data, plan, 4, 2, step)
        model.params.zero_grad()
        l1_loss(rdst_forward(Tensor(lr), model.params, model.config), hr).backward()
        adam_step(model.params, plan.lr_at(2, step), state)
    same = params_digest(tuned.params) == params_digest(model.params)
    detail.append(f"lambda=0 bitwise {'equal' if same else 'DIFFERENT'}")
    assert same

    unet_path = tmp_path / "unet.ckpt"
    train_unet(data, UNetConfig(base_width=2, levels=3), UNetSchedule(steps=2, batch=2), unet_path)
    before = unet_digest(unet_path)
    for variant in ("E1", "D", "HRL"):
        out = finetune_stage2(_tiny_plan(variant=variant), data, stage1, UNet.load(unet_path), tmp_path / variant)
        assert out.exists() and load_training_checkpoint(out)[3] == 8
        assert unet_digest(unet_path) == before
    detail.append("E1/D/HRL completed, U-Net hash unchanged")


# -- 8: determinism ------------------------------------------------------------

FLAGS = ["--model.width=12", "--model.growth=6", "--model.heads=6", "--model.window=4", "--model.n_rdstb=1",
         "--model.dstb_per_rdstb=1", "--data.canvas=16", "--data.count=4", "--data.val_count=2",
         "--data.test_count=2", "--data.hr_patch=16", "--train.batch=2", "--train.stage1.steps=3",
         "--train.stage2.steps=3", "--train.val_count=2", "--unet.base_width=2", "--unet.levels=3",
         "--unet.steps=2", "--unet.batch=2"]


def _tree(root):
    h = hashlib.sha256()
    for f in sorted(root.rglob("*")):
        # wall-clock timings are split into their own files and excluded by design
        if f.is_file() and not f.name.endswith(".timing.jsonl"):
            h.update(str(f.relative_to(root)).encode())
            # config.txt records the run's own directories; compare it relative to the root
            h.update(f.read_bytes().replace(str(root).encode(), b"<root>"))
    return h.hexdigest()


def _pipeline(root, capsys):
    data, run = root / "data", root / "run"
    common = ["--seed", "11", "--data", str(data), "--out", str(run)] + FLAGS
    outputs = []
    for argv in (["gen-data", "--out", str(data), "--seed", "11"] + FLAGS, ["train"] + common,
                 ["seg-train"] + common, ["finetune", "--unet", str(run / "unet.ckpt")] + common,
                 ["eval", "--ckpt", str(run / "stage2.ckpt"), "--unet", str(run / "unet.ckpt")] + common,
                 ["infer", "--in", str(root.parent / "lr.png"), "--out", str(root / "sr.png"),
                  "--ckpt", str(run / "stage2.ckpt")],
                 ["cost", "--input", "1x1x40x32"] + FLAGS):
        assert main(argv) == 0, argv[0]
        outputs.append(capsys.readouterr().out.replace(str(root), "<root>"))
    return _tree(root), outputs


@pytest.mark.criterion(8)
def test_same_seed_same_bytes(detail, tmp_path, capsys):
    write_png(tmp_path / "lr.png", np.random.default_rng(80).random((8, 8)))
    a = _pipeline(tmp_path / "a", capsys)
    b = _pipeline(tmp_path / "b", capsys)
    assert a[1] == b[1]
    assert a[0] == b[0]
    detail.append("gen-data/train/seg-train/finetune/eval/infer/cost outputs byte-identical across two runs")
