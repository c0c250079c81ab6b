"""Loss, metrics, AdamW, the training/evaluation loops and gradient attribution."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .model import SemanticLens
from .numcore import Rng, Tensor
from .semantics import mask_bce, mask_iou
from .synthvid import ValidationError, VideoClip, _atomic_write, load_split

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ metrics


def charbonnier(sr: Tensor, hr, eps: float = 1e-3) -> Tensor:
    """Mean of sqrt(d^2 + eps^2), written as eps*sqrt(1+(d/eps)^2) so that
    identical inputs give exactly eps."""
    hr = nc.as_tensor(hr)
    if sr.shape != hr.shape:
        raise nc.DimensionError(f"charbonnier shape mismatch: {sr.shape} vs {hr.shape}")
    z = (sr - hr) * (1.0 / eps)
    return nc.mean(nc.sqrt(nc.square(z) + 1.0)) * eps


def psnr(a, b, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _ssim_window() -> np.ndarray:
    x = np.arange(SSIM_WIN) - SSIM_WIN // 2
    g = np.exp(-x * x / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise nc.DimensionError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < SSIM_WIN or a.shape[-2] < SSIM_WIN:
        raise ValidationError(f"ssim needs images >= {SSIM_WIN}x{SSIM_WIN}, got {a.shape[-2:]}")
    g = _ssim_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    vals = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(m.mean())
    return float(np.mean(vals))


@dataclass
class MetricsRecord:
    rows: list[tuple[str, float, float, float]] = field(default_factory=list)

    def add(self, clip_id: str, psnr_db: float, ssim_v: float, loss: float) -> None:
        self.rows.append((clip_id, psnr_db, ssim_v, loss))

    def _col(self, k: int) -> np.ndarray:
        return np.array([r[k] for r in self.rows], dtype=float)

    @property
    def mean_psnr(self) -> float:
        return float(self._col(1).mean())

    @property
    def std_psnr(self) -> float:
        return float(self._col(1).std())

    @property
    def mean_ssim(self) -> float:
        return float(self._col(2).mean())

    @property
    def std_ssim(self) -> float:
        return float(self._col(2).std())

    def to_csv(self) -> str:
        lines = ["clip_id,psnr_db,ssim,loss"]
        lines += [f"{c},{p!r},{s!r},{l!r}" for c, p, s, l in self.rows]
        if self.rows:
            lines.append(f"mean,{self.mean_psnr!r},{self.mean_ssim!r},{float(self._col(3).mean())!r}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        _atomic_write(Path(path), self.to_csv().encode("utf-8"))


# ---------------------------------------------------------------- optimiser


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], beta1: float = 0.9,
                 beta2: float = 0.99, weight_decay: float = 1e-4, eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros(p.shape) for n, p in self.params}
        self.v = {n: np.zeros(p.shape) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adamw_step(opt: AdamW, lr: float) -> None:
    opt.step(lr)


def cosine_lr(step: int, total: int, lr0: float, lr_min: float) -> float:
    if total <= 1:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / (total - 1)))


# --------------------------------------------------------------- evaluation


def reference_index(frames: int) -> int:
    return frames // 2


def infer(model: SemanticLens, clip: VideoClip, t_ref: int | None = None) -> np.ndarray:
    """Unclamped SR reference frame (3, 4H, 4W)."""
    t_ref = reference_index(clip.frames) if t_ref is None else t_ref
    with nc.no_grad():
        sr, _ = model(clip.lr, clip.labels, t_ref)
    return sr.data


def evaluate(model: SemanticLens, clips: Sequence[tuple[str, VideoClip]], eps: float = 1e-3) -> MetricsRecord:
    rec = MetricsRecord()
    for cid, clip in sorted(clips, key=lambda c: c[0]):
        t = reference_index(clip.frames)
        sr = infer(model, clip, t)
        hr = clip.hr[t]
        loss = charbonnier(Tensor(sr), hr, eps).item()
        shown = np.clip(sr, 0.0, 1.0)
        rec.add(cid, psnr(shown, hr), ssim(shown, hr), loss)
    return rec


def bicubic_metrics(clips: Sequence[tuple[str, VideoClip]]) -> MetricsRecord:
    """Metrics of the plain bicubic x4 upsample of each reference frame."""
    from .synthvid import SCALE, bicubic_resize

    rec = MetricsRecord()
    for cid, clip in sorted(clips, key=lambda c: c[0]):
        t = reference_index(clip.frames)
        _, H, W = clip.lr[t].shape
        with nc.no_grad():
            up = bicubic_resize(clip.lr[t], SCALE * H, SCALE * W).data
        shown = np.clip(up, 0.0, 1.0)
        rec.add(cid, psnr(shown, clip.hr[t]), ssim(shown, clip.hr[t]), float("nan"))
    return rec


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: SemanticLens
    optimizer: AdamW
    rng: Rng
    losses: list[float]
    metrics: MetricsRecord | None = None


def random_crop(clip: VideoClip, patch: int, rng: Rng) -> VideoClip:
    _, _, H, W = clip.lr.shape
    if patch >= H and patch >= W:
        return clip
    y = int(rng.integers(0, H - patch + 1))
    x = int(rng.integers(0, W - patch + 1))
    return clip.crop(y, x, patch, patch)


def pretrain_extractor(model: SemanticLens, clips: Sequence[VideoClip], steps: int, lr: float,
                       rng: Rng, patch: int | None = None) -> list[float]:
    """Mask-only training of the learned extractor (per-pixel BCE)."""
    ext = model.extractor
    opt = AdamW(ext.named_parameters(), weight_decay=0.0)
    losses = []
    for step in range(steps):
        clip = clips[int(rng.integers(0, len(clips)))]
        if patch:
            clip = random_crop(clip, patch, rng)
        opt.zero_grad()
        bundle = ext(clip.lr)
        loss = mask_bce(bundle.mask_logits, clip.labels)
        nc.backward(loss)
        opt.step(cosine_lr(step, steps, lr, lr * 0.05))
        losses.append(loss.item())
    return losses


def extractor_iou(model: SemanticLens, clips: Sequence[VideoClip]) -> float:
    """Mean IoU over present instances of the learned extractor's label maps."""
    scores = []
    with nc.no_grad():
        for clip in clips:
            pred = model.extractor(clip.lr).labels
            ids = [i for i in range(1, clip.num_instances + 1) if (clip.labels == i).any()]
            scores.extend(mask_iou(pred, clip.labels, ids).values())
    return float(np.mean(scores))


def train(cfg: RunConfig, train_clips: Sequence[tuple[str, VideoClip]],
          val_clips: Sequence[tuple[str, VideoClip]] = (), seed: int | None = None,
          out_dir: str | Path | None = None, resume: Checkpoint | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Deterministic training loop; returns the trained model and loss trace."""
    if not train_clips:
        raise ValidationError("training split is empty")
    seed = cfg["train.seed"] if seed is None else seed
    cfg = cfg.with_values({"train.seed": seed})
    model = SemanticLens(cfg)
    rng = Rng(seed).spawn(0x7A1)
    clips = [c for _, c in sorted(train_clips, key=lambda c: c[0])]
    if cfg["train.extractor_mode"] == "learned" and cfg["train.extractor_steps"] > 0 and resume is None:
        pretrain_extractor(model, clips, cfg["train.extractor_steps"], cfg["train.extractor_lr"],
                           rng.spawn(1), cfg["train.patch"])
    opt = AdamW(model.trainable(), cfg["train.beta1"], cfg["train.beta2"], cfg["train.weight_decay"])
    if resume is not None:
        resume.restore(model, opt, rng)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    total = cfg["train.steps"]
    eps = cfg["train.eps"]
    lam = cfg["train.lambda_mask"] if cfg["train.extractor_mode"] == "learned" else 0.0
    losses: list[float] = []
    log_lines = ["step,loss,lr"]
    for step in range(opt.step_count, total):
        clip = random_crop(clips[int(rng.integers(0, len(clips)))], cfg["train.patch"], rng)
        t_ref = reference_index(clip.frames)
        lr_t = cosine_lr(step, total, cfg["train.lr"], cfg["train.lr_min"])
        opt.zero_grad()
        try:
            sr, bundle = model(clip.lr, clip.labels, t_ref)
            loss = charbonnier(sr, clip.hr[t_ref], eps)
            if lam > 0:
                loss = loss + mask_bce(bundle.mask_logits, clip.labels) * lam
            nc.backward(loss)
        except nc.NonFiniteError as exc:
            _dump_divergence(out, step, lr_t, losses, exc)
            raise TrainingDiverged(f"non-finite values at step {step}: {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            _dump_divergence(out, step, lr_t, losses, None)
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.step(lr_t)
        losses.append(value)
        log_lines.append(f"{step},{value!r},{lr_t!r}")
        if on_step is not None:
            on_step(step, value)
        if cfg["train.log_every"] and step % cfg["train.log_every"] == 0:
            log.info("step %d loss %.6f lr %.3g", step, value, lr_t)
        done = step + 1
        if out is not None and cfg["train.ckpt_every"] and done % cfg["train.ckpt_every"] == 0 and done < total:
            save_checkpoint(out / f"checkpoint_{done:06d}.slckpt", model, opt, rng, cfg)
        if cfg["train.eval_every"] and done % cfg["train.eval_every"] == 0 and val_clips and done < total:
            rec = evaluate(model, val_clips, eps)
            log.info("step %d val psnr %.3f ssim %.4f", done, rec.mean_psnr, rec.mean_ssim)
    metrics = evaluate(model, val_clips, eps) if val_clips else None
    if out is not None:
        save_checkpoint(out / "checkpoint.slckpt", model, opt, rng, cfg)
        _atomic_write(out / "train_log.csv", ("\n".join(log_lines) + "\n").encode())
        if metrics is not None:
            metrics.write(out / "metrics.csv")
    return TrainResult(model, opt, rng, losses, metrics)


def _dump_divergence(out: Path | None, step: int, lr: float, losses: list[float], exc) -> None:
    msg = f"step={step}\nlr={lr!r}\nlast_losses={losses[-10:]!r}\nerror={exc}\n"
    log.error("training diverged:\n%s", msg)
    if out is not None:
        _atomic_write(out / "divergence_dump.txt", msg.encode())


def model_from_checkpoint(ckpt: Checkpoint) -> SemanticLens:
    from .config import parse_config_text

    cfg = parse_config_text(ckpt.config_text, "<checkpoint>")
    model = SemanticLens(cfg)
    model.load_state_dict(ckpt.params)
    return model


def evaluate_checkpoint(path, data_root, split: str = "val", eps: float | None = None) -> MetricsRecord:
    ckpt = load_checkpoint(path)
    model = model_from_checkpoint(ckpt)
    if eps is None:
        from .config import parse_config_text
        eps = parse_config_text(ckpt.config_text)["train.eps"]
    return evaluate(model, load_split(data_root, split), eps)


# -------------------------------------------------------------- attribution


def attribute(model: SemanticLens, clip: VideoClip, patch: tuple[int, int, int, int],
              t_ref: int | None = None) -> np.ndarray:
    """Input-gradient attribution of an SR patch (y, x, h, w) to every LR frame.

    Returns (T, H, W) per-pixel gradient magnitudes scaled so the global
    maximum is 1 (all zeros if the gradient vanishes).
    """
    t_ref = reference_index(clip.frames) if t_ref is None else t_ref
    T, _, H, W = clip.lr.shape
    y, x, h, w = patch
    if h < 1 or w < 1 or y < 0 or x < 0 or y + h > 4 * H or x + w > 4 * W:
        raise ValidationError(f"patch {patch} outside the {4 * H}x{4 * W} SR frame")
    lr = Tensor(clip.lr, requires_grad=True)
    sr, _ = model(lr, clip.labels, t_ref)
    target = nc.tsum(sr[:, y:y + h, x:x + w])
    nc.backward(target)
    g = lr.grad if lr.grad is not None else np.zeros(lr.shape)
    mag = np.sqrt((g * g).sum(axis=1))
    peak = mag.max()
    return mag / peak if peak > 0 else mag
