"""Invariant suite behind ``semlens selftest``.

Every check returns a ``CheckResult``; the runner prints one table row per
check. Runs in a few seconds on one core.
"""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc
from .checkpoint import Checkpoint, decode, encode
from .config import RunConfig
from .enhancer import Enhancer, EnhancerConfig
from .image_align import WindowSpec, build_attention_mask, masked_local_attention, unmasked_window_mask
from .model import SemanticLens
from .numcore import Rng, Tensor, finite_diff_check
from .semantics import oracle_bundle
from .space import Isee, gps_modulate
from .synthvid import (DatasetSpec, bicubic_resize, make_clip, read_labels, read_ppm, write_labels,
                       write_ppm)

GRAD_TOL = 1e-4
DEEP_GRAD_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def randomize(module: nc.Module, rng: Rng, std: float = 0.05) -> None:
    """Fill zero-initialised parameters with small noise (and jitter the
    rest) so no gradient path is hidden behind an exact zero."""
    for _, p in module.named_parameters():
        scale = p.data.std() if p.size > 1 else 0.0
        if scale == 0.0:
            p.data[...] = p.data + rng.normal(p.shape, std=std)
        else:
            p.data[...] = p.data + rng.normal(p.shape, std=0.1 * scale)


def sample_coords(size: int, n: int, rng: Rng) -> list[int]:
    if size <= n:
        return list(range(size))
    return sorted(int(i) for i in rng.choice(size, size=n, replace=False))


# --------------------------------------------------------------- primitives


def primitive_gradient_errors(seed: int = 0) -> dict[str, float]:
    """Worst relative FD error for each differentiable primitive."""
    rng = Rng(seed)
    errs: dict[str, float] = {}

    def check(name: str, make: Callable[[Tensor], Tensor], shape, positive: bool = False,
              weights: np.ndarray | None = None):
        data = rng.uniform(0.5, 2.0, shape) if positive else rng.normal(shape)
        x = Tensor(data, requires_grad=True)
        w = Tensor(rng.normal(make(Tensor(data)).shape) if weights is None else weights)
        errs[name] = finite_diff_check(lambda: nc.tsum(make(x) * w), x)

    b = Tensor(rng.normal((4, 3)))
    cw = Tensor(rng.normal((4, 3, 3, 3)))
    mw, pw = Tensor(rng.normal((3, 2))), Tensor(rng.normal((2, 3)))
    gain, bias = Tensor(rng.normal(5)), Tensor(rng.normal(5))
    mask = np.where(rng.uniform(shape=(3, 6)) < 0.3, -np.inf, 0.0)
    mask[:, 0] = 0.0
    check("add", lambda x: x + b, (4, 3))
    check("mul", lambda x: x * b, (4, 3))
    check("div", lambda x: b / x, (4, 3), positive=True)
    check("exp", nc.exp, (4, 3))
    check("log", nc.log, (4, 3), positive=True)
    check("sqrt", nc.sqrt, (4, 3), positive=True)
    check("sigmoid", nc.sigmoid, (4, 3))
    check("softplus", nc.softplus, (4, 3))
    check("gelu", nc.gelu, (4, 3))
    check("relu", lambda x: nc.relu(x + 0.05), (4, 3))
    check("matmul", lambda x: nc.matmul(x, mw), (4, 3))
    check("softmax", nc.softmax_lastdim, (3, 6))
    check("softmax_masked", lambda x: nc.softmax_lastdim(x, mask), (3, 6))
    check("layer_norm", lambda x: nc.layer_norm(x, gain, bias), (4, 5))
    check("conv2d", lambda x: nc.conv2d(x, cw, Tensor(np.ones(4))), (3, 5, 6))
    check("conv1x1", lambda x: nc.conv1x1(x, pw), (3, 4, 4))
    check("pixel_shuffle", lambda x: nc.pixel_shuffle(x, 2), (8, 3, 3))
    check("pixel_unshuffle", lambda x: nc.pixel_unshuffle(x, 2), (2, 4, 6))
    check("local_windows", lambda x: nc.local_windows(x, 1), (2, 4, 5))
    check("pad_reflect", lambda x: nc.pad_hw(x, 2, 3), (2, 4, 5))
    check("roll", lambda x: nc.roll(x, (1, -2), (1, 2)), (2, 4, 5))
    check("concat_index", lambda x: nc.concat([x[:, 1:], x[:, :2]], axis=1), (3, 4))
    check("bicubic_resize", lambda x: bicubic_resize(x, 12, 8), (3, 3, 2))
    check("mean_transpose", lambda x: nc.mean(nc.transpose(x, (1, 0)), axis=1), (4, 3))
    return errs


# ------------------------------------------------------------- composition


def tiny_enhancer_setup(seed: int = 0, width: int = 8, size: int = 8, frames: int = 3):
    """Randomised 8x8/T=3/C=8 enhancer with an oracle bundle."""
    rng = Rng(seed)
    cfg = EnhancerConfig(width=width, blocks=2, heads=2, win=4, mlp_ratio=2, radius=1)
    enh = Enhancer(rng.spawn(1), cfg)
    randomize(enh, rng.spawn(2))
    clip = make_clip(DatasetSpec(lr_size=size, frames=frames), seed)
    feats = Tensor(rng.normal((frames, width, size, size)))
    bundle = oracle_bundle(clip.labels, feats, 3)
    return enh, bundle, clip


def composed_gradient_error(seed: int = 0, n_coords: int = 12) -> float:
    """SPACE -> MFSAB -> reconstruct, analytic vs FD on the input frames and
    on a sample of parameter entries."""
    enh, bundle, clip = tiny_enhancer_setup(seed)
    rng = Rng(seed).spawn(9)
    t_ref = clip.frames // 2
    lr = Tensor(clip.lr.copy(), requires_grad=True)
    w = Tensor(rng.normal((3, 4 * clip.lr.shape[2], 4 * clip.lr.shape[3])))

    def f():
        return nc.tsum(enh(lr, bundle, t_ref) * w)

    worst = finite_diff_check(f, lr, coords=sample_coords(lr.size, n_coords, rng))
    picks = ["branches.3.space.0.gps.conv2.weight", "branches.3.space.0.isee.wv.weight",
             "branches.3.blocks.1.attn.wq.weight", "branches.3.image.wk", "head.out.weight"]
    named = dict(enh.named_parameters())
    for name in picks:
        p = named[name]
        p.requires_grad = True
        worst = max(worst, finite_diff_check(f, p, coords=sample_coords(p.size, 4, rng)))
    return worst


# ---------------------------------------------------------------- attention


def masked_attention_trial(rng: Rng) -> tuple[bool, float, float]:
    """One random IMAGE configuration: (masked weights all exactly zero,
    worst row-sum error, masked-vs-unmasked gap on agreeing labels)."""
    r = int(rng.integers(1, 3))
    H, W, C = int(rng.integers(3, 7)), int(rng.integers(3, 7)), int(rng.integers(2, 5))
    spec = WindowSpec(r)
    n_ids = int(rng.integers(1, 4))
    ref_l = rng.integers(0, n_ids, (H, W))
    sup_l = rng.integers(0, n_ids, (H, W))
    ref, sup = Tensor(rng.normal((C, H, W))), Tensor(rng.normal((C, H, W)))
    wq, wk, wv = (Tensor(rng.normal((C, C))) for _ in range(3))
    mask = build_attention_mask(ref_l, sup_l, spec)
    _, attn = masked_local_attention(ref, sup, mask, spec, wq, wk, wv, return_attention=True)
    a = attn.data.reshape(H, W, -1)
    zeros_ok = bool(np.all(a[np.isneginf(mask)] == 0.0))
    row_err = float(np.abs(a.sum(-1) - 1.0).max())
    same = np.full((H, W), int(rng.integers(0, n_ids)))
    m_same = build_attention_mask(same, same, spec)
    m_free = unmasked_window_mask(H, W, spec)
    o1 = masked_local_attention(ref, sup, m_same, spec, wq, wk, wv).data
    o2 = masked_local_attention(ref, sup, m_free, spec, wq, wk, wv).data
    return zeros_ok, row_err, float(np.abs(o1 - o2).max())


def isee_permutation_gap(seed: int = 0) -> tuple[float, float, float]:
    """(max output change under token permutation, min weight, worst row-sum error)."""
    rng = Rng(seed)
    C, H, W, N = 6, 5, 4, 4
    isee = Isee(rng, C, heads=2)
    randomize(isee, rng.spawn(1), std=0.3)
    feats = Tensor(rng.normal((C, H, W)))
    tokens = rng.normal((N, C))
    out, attn = isee(feats, Tensor(tokens))
    perm = rng.gen.permutation(N)
    out_p, _ = isee(feats, Tensor(tokens[perm]))
    a = attn.data
    return float(np.abs(out.data - out_p.data).max()), float(a.min()), float(np.abs(a.sum(-1) - 1).max())


def softmax_rowsum_error(seed: int = 0) -> float:
    rng = Rng(seed)
    x = Tensor(rng.normal((16, 9)) * 4)
    return float(np.abs(nc.softmax_lastdim(x).data.sum(-1) - 1.0).max())


# ------------------------------------------------------------------ identity


def identity_at_init_gaps(seed: int = 0) -> tuple[bool, float]:
    """(gps_modulate with zero gamma/beta is bit-exact, max |model - bicubic|)."""
    rng = Rng(seed)
    f = Tensor(rng.normal((4, 5, 5)))
    z = Tensor(np.zeros((4, 5, 5)))
    gps_exact = bool(np.array_equal(gps_modulate(f, z, z).data, f.data))
    cfg = RunConfig({"train.seed": seed})
    model = SemanticLens(cfg)
    clip = make_clip(DatasetSpec(lr_size=12), seed)
    t = clip.frames // 2
    with nc.no_grad():
        sr, _ = model(clip.lr, clip.labels, t)
        bic = bicubic_resize(clip.lr[t], 48, 48)
    return gps_exact, float(np.abs(sr.data - bic.data).max())


# ---------------------------------------------------------------- round trip


def roundtrip_ok(seed: int = 0) -> dict[str, bool]:
    rng = Rng(seed)
    img = np.round(rng.uniform(shape=(3, 6, 7)) * 255) / 255
    labels = rng.integers(0, 5, (6, 7))
    ckpt = Checkpoint({"a": rng.normal((2, 3)), "b": rng.normal(())}, 7,
                      {"m:a": rng.normal((2, 3)), "v:a": rng.uniform(shape=(2, 3))},
                      rng.get_state(), RunConfig().canonical())
    back = decode(encode(ckpt))
    with tempfile.TemporaryDirectory() as tmp:
        write_ppm(img, Path(tmp) / "x.ppm")
        write_labels(labels, Path(tmp) / "x.sllm")
        ppm = np.array_equal(read_ppm(Path(tmp) / "x.ppm"), img)
        sllm = np.array_equal(read_labels(Path(tmp) / "x.sllm"), labels)
    ck = (encode(back) == encode(ckpt)
          and all(np.array_equal(back.params[k], ckpt.params[k]) for k in ckpt.params))
    return {"ppm": ppm, "sllm": sllm, "checkpoint": ck}


def oracle_labels_exact(seed: int = 0) -> bool:
    clip = make_clip(DatasetSpec(lr_size=12), seed)
    model = SemanticLens(RunConfig())
    bundle = model.semantics(clip.lr, clip.labels)
    return bool(np.array_equal(bundle.labels, clip.labels))


# -------------------------------------------------------------------- runner


def collect_checks() -> list[tuple[str, Callable[[], CheckResult]]]:
    def prim():
        errs = primitive_gradient_errors()
        name, worst = max(errs.items(), key=lambda kv: kv[1])
        return CheckResult("gradient: primitives", worst <= GRAD_TOL,
                           f"{len(errs)} ops, worst {worst:.2e} ({name})")

    def deep():
        err = composed_gradient_error()
        return CheckResult("gradient: SPACE->MFSAB->head", err <= DEEP_GRAD_TOL, f"worst {err:.2e}")

    def rowsum():
        err = softmax_rowsum_error()
        return CheckResult("softmax row sums", err <= 1e-9, f"max |sum-1| {err:.2e}")

    def masked():
        rng = Rng(11)
        trials = [masked_attention_trial(rng.spawn(i)) for i in range(200)]
        zeros = all(t[0] for t in trials)
        rows = max(t[1] for t in trials)
        gap = max(t[2] for t in trials)
        ok = zeros and rows <= 1e-9 and gap <= 1e-12
        return CheckResult("IMAGE mask exactness", ok,
                           f"200 configs, -inf->0: {zeros}, row err {rows:.1e}, agree gap {gap:.1e}")

    def isee():
        gap, lo, rows = isee_permutation_gap()
        return CheckResult("ISEE permutation symmetry", gap <= 1e-12 and lo >= 0 and rows <= 1e-9,
                           f"gap {gap:.1e}, min w {lo:.1e}, row err {rows:.1e}")

    def identity():
        exact, gap = identity_at_init_gaps()
        return CheckResult("identity at init", exact and gap == 0.0,
                           f"gps exact {exact}, |sr-bicubic| {gap:.1e}")

    def rt():
        res = roundtrip_ok()
        return CheckResult("round trips", all(res.values()), ", ".join(f"{k} {v}" for k, v in res.items()))

    def oracle():
        ok = oracle_labels_exact()
        return CheckResult("oracle masks exact", ok, "labels equal generator ground truth" if ok else "mismatch")

    return [("softmax row sums", rowsum), ("gradient: primitives", prim), ("IMAGE mask exactness", masked),
            ("ISEE permutation symmetry", isee), ("identity at init", identity),
            ("oracle masks exact", oracle), ("round trips", rt), ("gradient: SPACE->MFSAB->head", deep)]


def run_selftest(emit: Callable[[str], None] = print) -> bool:
    t0 = time.time()
    results: list[CheckResult] = []
    for name, check in collect_checks():
        try:
            res = check()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
        results.append(res)
    width = max(len(r.name) for r in results)
    emit(f"{'check':<{width}}  status  detail")
    for r in results:
        emit(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.detail}")
    ok = all(r.passed for r in results)
    emit(f"{sum(r.passed for r in results)}/{len(results)} passed in {time.time() - t0:.1f}s")
    return ok
