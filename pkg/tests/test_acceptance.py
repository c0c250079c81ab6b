"""Acceptance suite: one verdict line per criterion, printed after the run.

The training criteria are slow (tens of minutes on one core in total).
"""
import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from semlens import numcore as nc
from semlens.config import RunConfig
from semlens.enhancer import Enhancer
from semlens.image_align import ImageAlign, WindowSpec
from semlens.layers import Conv3x3
from semlens.model import SemanticLens
from semlens.numcore import Rng, Tensor
from semlens.selftest import (composed_gradient_error, identity_at_init_gaps, isee_permutation_gap,
                              masked_attention_trial, primitive_gradient_errors)
from semlens.semantics import oracle_bundle
from semlens.synthvid import DatasetSpec, SceneSpec, Sprite, generate_clip, make_clip
from semlens.train_eval import (attribute, bicubic_metrics, charbonnier, evaluate, extractor_iou, pretrain_extractor,
                                psnr, ssim, train)

from test_train_eval import psnr_loop, ssim_loop


def verdict(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, detail


# ------------------------------------------------------------- gradients


def test_gradient_integrity():
    t0 = time.time()
    prim = primitive_gradient_errors(0)
    deep = composed_gradient_error(0)
    elapsed = time.time() - t0
    worst_name = max(prim, key=prim.get)
    ok = max(prim.values()) <= 1e-4 and deep <= 1e-3 and elapsed <= 120
    verdict("gradient integrity", ok,
            f"{len(prim)} ops worst {prim[worst_name]:.1e} ({worst_name}) <= 1e-4; "
            f"composed SPACE->MFSAB->reconstruct {deep:.1e} <= 1e-3; {elapsed:.1f}s <= 120s")


# ------------------------------------------------------- identity at init


def test_identity_at_init():
    gps_exact, gap = identity_at_init_gaps(0)
    cfg = RunConfig({"data.lr_size": 16, "train.patch": 16})
    model = SemanticLens(cfg)
    clips = [(f"v{i:02d}", make_clip(DatasetSpec(lr_size=16), 900 + i)) for i in range(4)]
    rec, ref = evaluate(model, clips), bicubic_metrics(clips)
    db = max(abs(a[1] - b[1]) for a, b in zip(rec.rows, ref.rows))
    ok = gps_exact and gap == 0.0 and db <= 1e-9
    verdict("identity-at-init", ok,
            f"(a) gps bit-exact={gps_exact}; (b) max|forward-bicubic|={gap:.1e}; (c) eval PSNR gap {db:.1e} dB")


# ------------------------------------------------------ masked attention


def test_masked_attention_exactness():
    rng = Rng(2024)
    zeros, rows, gap = True, 0.0, 0.0
    for _ in range(1000):
        z, r, g = masked_attention_trial(rng)
        zeros, rows, gap = zeros and z, max(rows, r), max(gap, g)
    ok = zeros and rows <= 1e-9 and gap <= 1e-12
    verdict("masked-attention exactness", ok,
            f"1000 configs: masked weights exactly 0={zeros}; row-sum err {rows:.1e}; agree gap {gap:.1e}")


def test_isee_symmetry():
    worst_perm, worst_min, worst_row = 0.0, 1.0, 0.0
    for seed in range(20):
        p, m, r = isee_permutation_gap(seed)
        worst_perm, worst_min, worst_row = max(worst_perm, p), min(worst_min, m), max(worst_row, r)
    ok = worst_perm <= 1e-12 and worst_min >= 0 and worst_row <= 1e-9
    verdict("ISEE symmetry", ok,
            f"20 draws: permutation gap {worst_perm:.1e}; min weight {worst_min:.2e}; row-sum err {worst_row:.1e}")


# ------------------------------------------------------------ alignment


def alignment_trial(seed: int) -> tuple[float, float]:
    """Sprite moving 2 LR px/frame; (MSD before, MSD after) over the
    reference sprite pixels, on freshly initialised stem features."""
    rng = Rng(seed)
    texture = ("stripes", "checker")[seed % 2]
    spec = SceneSpec(height=96, width=96,
                     sprites=[Sprite(size=32, texture=texture, velocity=(0.0, 8.0), position=(32, 8))])
    clip = generate_clip(spec, seed)
    c1, c2 = Conv3x3(rng, 3, 8), Conv3x3(rng, 8, 8)
    align = ImageAlign(rng, 8, WindowSpec(3), locality=RunConfig()["model.image_locality"])
    t_ref, t_sup = 2, 3
    with nc.no_grad():
        f = c2(nc.relu(c1(Tensor(clip.lr)))).data
        out = align(Tensor(f[t_ref]), Tensor(f[t_sup]), clip.labels[t_ref], clip.labels[t_sup]).data
    inside = clip.labels[t_ref] == 1
    before = float(((f[t_sup] - f[t_ref]) ** 2)[:, inside].mean())
    after = float(((out - f[t_ref]) ** 2)[:, inside].mean())
    return before, after


def test_alignment_efficacy():
    wins = sum(after < before for before, after in map(alignment_trial, range(100)))
    verdict("alignment efficacy", wins >= 95, f"{wins}/100 trials reduce sprite MSD (need >= 95)")


# ------------------------------------------------------------- overfit


OVERFIT = {"train.lr": 2e-3, "train.lr_min": 2e-5, "train.steps": 300, "train.log_every": 0}


@pytest.fixture(scope="module")
def overfit_run():
    clip = make_clip(DatasetSpec(), 7)  # LR 32x32, T=5
    clips = [("c0", clip)]
    t0 = time.time()
    res = train(RunConfig(OVERFIT), clips, clips, seed=0)
    return res, clips, time.time() - t0


def test_overfit_convergence(overfit_run):
    res, clips, elapsed = overfit_run
    model_db, bic_db = res.metrics.mean_psnr, bicubic_metrics(clips).mean_psnr
    ratio = res.losses[-1] / res.losses[10]
    ok = model_db >= bic_db + 2.0 and ratio <= 0.5 and elapsed <= 900 and len(res.losses) <= 500
    verdict("overfit convergence", ok,
            f"{len(res.losses)} steps: {model_db:.2f} dB vs bicubic {bic_db:.2f} (+{model_db - bic_db:.2f}, need 2.0); "
            f"final/step-10 loss {ratio:.3f} <= 0.5; {elapsed:.0f}s <= 900s")


def test_attribution_concentrates_on_instance(overfit_run):
    """Reported direction check on the trained toy model."""
    res, clips, _ = overfit_run
    clip = clips[0][1]
    t = clip.frames // 2
    ident = 1
    ys, xs = np.nonzero(clip.labels[t] == ident)
    cy, cx = int(np.median(ys)), int(np.median(xs))
    patch = (4 * cy - 4, 4 * cx - 4, 8, 8)
    maps = attribute(res.model, clip, patch, t)
    inside = clip.labels == ident
    ratio = maps[inside].mean() / maps[~inside].mean()
    verdict("attribution direction (reported)", ratio > 1.0,
            f"mean attribution inside instance / outside = {ratio:.2f} (> 1)")


# ------------------------------------------------------------- ablation

ABLATION_SEEDS = (0, 1, 2)
ABLATION_TRAIN = dict(n=32, lr_size=24)
ABLATION = {"train.lr": 2e-3, "train.lr_min": 2e-5, "train.steps": 1000, "train.patch": 16,
            "data.lr_size": 24, "train.log_every": 0}
VARIANTS = {"baseline": (False, False, False), "+GPS": (True, False, False),
            "+GPS+ISEE": (True, True, False), "full": (True, True, True)}


def test_ablation_direction():
    tr = [(f"t{i:03d}", make_clip(DatasetSpec(lr_size=ABLATION_TRAIN["lr_size"]), 1000 + i))
          for i in range(ABLATION_TRAIN["n"])]
    val = [(f"v{i:02d}", make_clip(DatasetSpec(lr_size=16), 5000 + i)) for i in range(16)]
    bic = bicubic_metrics(val).mean_psnr
    table, wins = [], 0
    for seed in ABLATION_SEEDS:
        row = {}
        for name, (g, i, m) in VARIANTS.items():
            cfg = RunConfig({**ABLATION, "model.use_gps": g, "model.use_isee": i, "model.use_image": m})
            row[name] = train(cfg, tr, val, seed=seed).metrics.mean_psnr
        wins += row["full"] > row["baseline"]
        table.append(f"seed {seed}: " + ", ".join(f"{k} {v:.3f}" for k, v in row.items()))
    for line in table:
        ACCEPTANCE_LINES.append(f"       ablation {line} (bicubic {bic:.3f})")
    verdict("ablation direction", wins >= 2, f"full > baseline in {wins}/{len(ABLATION_SEEDS)} seeds (need 2)")


# ----------------------------------------------------------- oracle masks


def test_oracle_mask_fidelity():
    exact = True
    for seed in range(10):
        clip = make_clip(DatasetSpec(lr_size=16), seed)
        feats = Tensor(Rng(seed).normal((clip.frames, 8, 16, 16)))
        exact = exact and np.array_equal(oracle_bundle(clip.labels, feats, 3).labels, clip.labels)
    cfg = RunConfig({"train.extractor_mode": "learned"})
    model = SemanticLens(cfg)
    tr = [make_clip(DatasetSpec(), 1000 + i) for i in range(8)]
    val = [make_clip(DatasetSpec(), 5000 + i) for i in range(8)]
    pretrain_extractor(model, tr, cfg["train.extractor_steps"], cfg["train.extractor_lr"], Rng(0).spawn(1))
    iou = extractor_iou(model, val)
    verdict("oracle-mask fidelity", exact and iou >= 0.7,
            f"oracle labels bit-exact={exact}; learned extractor val IoU {iou:.3f} >= 0.7")


# ------------------------------------------------------------ determinism


def test_determinism(tmp_path):
    cfg = RunConfig({"model.C": 8, "model.C_s": 8, "model.win": 4, "model.r": 1, "data.lr_size": 12,
                     "train.patch": 8, "train.steps": 6, "train.log_every": 0})
    tr = [(f"t{i}", make_clip(DatasetSpec(lr_size=12), 40 + i)) for i in range(3)]
    val = [(f"v{i}", make_clip(DatasetSpec(lr_size=12), 60 + i)) for i in range(2)]
    train(cfg, tr, val, seed=5, out_dir=tmp_path / "a")
    train(cfg, tr, val, seed=5, out_dir=tmp_path / "b")
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("checkpoint.slckpt", "metrics.csv")}
    verdict("determinism", all(same.values()), ", ".join(f"{k} identical={v}" for k, v in same.items()))


# --------------------------------------------------------------- metrics


def test_metric_oracles():
    rng = Rng(77)
    a = rng.uniform(0, 1, (3, 16, 16))
    b = np.clip(a + rng.normal((3, 16, 16), std=0.05), 0, 1)
    dp = abs(psnr(a, b) - psnr_loop(a, b))
    ds = abs(ssim(a, b) - ssim_loop(a, b))
    eps = 1e-3
    ch = charbonnier(Tensor(a), a, eps).item()
    ok = dp <= 1e-9 and ds <= 1e-9 and ch == eps
    verdict("metric oracles", ok, f"PSNR gap {dp:.1e}; SSIM gap {ds:.1e}; charbonnier(x,x)={ch!r}")
    assert math.isfinite(ch)
