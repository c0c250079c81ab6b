"""``semlens`` command line: gen-data | train | eval | infer | attribute | selftest.

Exit codes: 0 success, 1 runtime failure, 2 config/validation failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import numcore as nc
from .checkpoint import CheckpointError, ConfigMismatch, check_config, load_checkpoint
from .config import RunConfig, load_config, parse_config_text
from .model import SemanticLens
from .synthvid import (SCALE, ParseError, ValidationError, _atomic_write, bicubic_resize, load_split,
                       make_dataset, read_manifest, write_pgm, write_ppm, load_clip)

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2

log = logging.getLogger("semlens")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--checkpoint", type=Path, help="checkpoint to load / resume")
    common.add_argument("--force", action="store_true", help="ignore checkpoint config-hash mismatch")
    common.add_argument("--data", type=Path, help="dataset directory (with manifest.tsv)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="semlens", description="Semantic-prior video super-resolution toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    tr = sub.add_parser("train", parents=[common], help="train and write checkpoint + metrics CSV")
    tr.add_argument("--steps", type=int, help="overrides train.steps")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    ev.add_argument("--split", choices=("train", "val"))
    inf = sub.add_parser("infer", parents=[common], help="write SR and bicubic reference frames")
    inf.add_argument("--split", choices=("train", "val"))
    inf.add_argument("--clip", help="clip id (default: every clip in the split)")
    at = sub.add_parser("attribute", parents=[common], help="gradient attribution heat maps")
    at.add_argument("--split", choices=("train", "val"))
    at.add_argument("--clip", help="clip id (default: first clip in the split)")
    at.add_argument("--patch", default=None, help="y,x,h,w in SR pixels (default: centre 16x16)")
    st = sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    st.add_argument("--inject-fault", choices=("softmax",), help=argparse.SUPPRESS)
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_values({"train.seed": args.seed})
    if getattr(args, "steps", None) is not None:
        cfg = cfg.with_values({"train.steps": args.steps})
    return cfg


def _require(value, flag: str):
    if value is None:
        raise ValidationError(f"{flag} is required for this command")
    return value


def _model(args, cfg: RunConfig) -> tuple[SemanticLens, RunConfig]:
    """Model from --checkpoint (its stored config wins) or a fresh init."""
    if args.checkpoint is None:
        return SemanticLens(cfg), cfg
    ckpt = load_checkpoint(args.checkpoint)
    stored = parse_config_text(ckpt.config_text, str(args.checkpoint))
    model = SemanticLens(stored)
    model.load_state_dict(ckpt.params)
    return model, stored


def _split(args, cfg: RunConfig) -> str:
    return getattr(args, "split", None) or cfg["eval.split"]


def _select(args, cfg, default_all: bool):
    root = _require(args.data, "--data")
    split = _split(args, cfg)
    if getattr(args, "clip", None):
        rows = {cid: rel for cid, _, rel in read_manifest(root)}
        if args.clip not in rows:
            raise ValidationError(f"clip {args.clip!r} not in {root}/manifest.tsv")
        return [(args.clip, load_clip(Path(root) / rows[args.clip]))]
    clips = load_split(root, split)
    if not clips:
        raise ValidationError(f"split {split!r} of {root} is empty")
    return clips if default_all else clips[:1]


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _require(args.out, "--out")
    seed = cfg["train.seed"]
    make_dataset(out, cfg.dataset_spec(), seed)
    _atomic_write(Path(out) / "config.txt", cfg.canonical().encode())
    print(f"wrote {cfg['data.n_clips']} clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train_eval import train

    cfg = _config(args)
    root = _require(args.data, "--data")
    out = _require(args.out, "--out")
    resume = None
    if args.checkpoint is not None:
        resume = load_checkpoint(args.checkpoint)
        check_config(resume, cfg, args.force)
    res = train(cfg, load_split(root, "train"), load_split(root, cfg["eval.split"]),
                out_dir=out, resume=resume)
    final = res.losses[-1] if res.losses else float("nan")
    print(f"trained {len(res.losses)} steps, final loss {final:.6f}; checkpoint in {out}")
    if res.metrics is not None:
        print(f"val PSNR {res.metrics.mean_psnr:.3f} +/- {res.metrics.std_psnr:.3f} dB, "
              f"SSIM {res.metrics.mean_ssim:.4f} +/- {res.metrics.std_ssim:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train_eval import evaluate

    cfg = _config(args)
    model, mcfg = _model(args, cfg)
    clips = _select(args, cfg, default_all=True)
    rec = evaluate(model, clips, mcfg["train.eps"])
    text = rec.to_csv()
    if args.out is not None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        rec.write(Path(args.out) / "metrics.csv")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_infer(args) -> int:
    from .figures import comparison_figure
    from .train_eval import infer, psnr

    cfg = _config(args)
    out = Path(_require(args.out, "--out"))
    model, _ = _model(args, cfg)
    for cid, clip in _select(args, cfg, default_all=True):
        t = clip.frames // 2
        sr = infer(model, clip, t)
        _, H, W = clip.lr[t].shape
        with nc.no_grad():
            bic = bicubic_resize(clip.lr[t], SCALE * H, SCALE * W).data
        folder = out / cid
        folder.mkdir(parents=True, exist_ok=True)
        write_ppm(sr, folder / f"sr_{t:02d}.ppm")
        write_ppm(bic, folder / f"bicubic_{t:02d}.ppm")
        scores = {"bicubic": f"{psnr(np.clip(bic, 0, 1), clip.hr[t]):.2f} dB",
                  "model": f"{psnr(np.clip(sr, 0, 1), clip.hr[t]):.2f} dB"}
        comparison_figure(bic, sr, clip.hr[t], folder / "comparison.png", scores)
        print(f"{cid}: {scores['model']} (bicubic {scores['bicubic']}) -> {folder}")
    return EXIT_OK


def _parse_patch(text: str | None, H: int, W: int) -> tuple[int, int, int, int]:
    if text is None:
        s = min(16, 4 * H, 4 * W)
        return (4 * H - s) // 2, (4 * W - s) // 2, s, s
    try:
        y, x, h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"--patch expects y,x,h,w integers, got {text!r}") from None
    return y, x, h, w


def cmd_attribute(args) -> int:
    from .figures import attention_figure, attribution_figure
    from .train_eval import attribute

    cfg = _config(args)
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    model, _ = _model(args, cfg)
    cid, clip = _select(args, cfg, default_all=False)[0]
    T, _, H, W = clip.lr.shape
    t_ref = T // 2
    patch = _parse_patch(args.patch, H, W)
    maps = attribute(model, clip, patch, t_ref)
    for t in range(T):
        write_pgm(maps[t], out / f"attribution_{t:02d}.pgm")
        n = max(int(clip.labels[t].max()), 1)
        write_pgm(clip.labels[t] / n, out / f"labels_{t:02d}.pgm")
    attribution_figure(maps, clip.lr, t_ref, out / "attribution.png", clip.labels)
    space = model.enhancer.branches[-1].space
    if space and space[0]._last_attn is not None:
        a = space[0]._last_attn.data.mean(axis=0)  # heads averaged: HW x tokens
        a = a.T.reshape(-1, H, W)
        for k in range(a.shape[0]):
            write_pgm(a[k], out / f"isee_attention_{k:02d}.pgm")
        names = [f"instance {k + 1}" for k in range(a.shape[0] - 1)] + ["background"]
        attention_figure(a, out / "isee_attention.png", names)
    print(f"{cid}: attribution for patch {patch} written to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    if args.inject_fault == "softmax":
        nc.set_softmax_fault(True)
    try:
        ok = run_selftest(print)
    finally:
        nc.set_softmax_fault(False)
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "attribute": cmd_attribute,
    "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, ConfigMismatch, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, CheckpointError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
