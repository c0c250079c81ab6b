"""Synthetic moving-sprite videos with exact instance labels, BI/BD
degradation, and the on-disk formats (PPM/PGM frames, SLLM label maps,
manifest)."""
from __future__ import annotations

import dataclasses
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numcore import DimensionError, Rng, Tensor, as_tensor, matmul, transpose

SCALE = 4
SHAPES = ("rect", "disc", "ring")
TEXTURES = ("stripes", "checker", "noise")

# one hue family per instance id, so identity is learnable from appearance
CATEGORY_PALETTE = np.array([
    [0.90, 0.20, 0.15],
    [0.15, 0.35, 0.95],
    [0.20, 0.85, 0.25],
    [0.95, 0.80, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
])


class ValidationError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Sprite:
    shape: str = "disc"
    texture: str = "stripes"
    size: int = 24
    velocity: tuple[float, float] = (0.0, 0.0)  # (vy, vx) HR px/frame
    position: tuple[int, int] | None = None  # top-left at t=0; None -> seeded
    color: tuple[float, float, float] | None = None  # None -> palette by id
    light_amp: float = 0.0
    light_period: float = 8.0


@dataclass
class SceneSpec:
    height: int = 128  # HR canvas
    width: int = 128
    sprites: list[Sprite] = field(default_factory=lambda: [Sprite(), Sprite(shape="rect", texture="checker")])
    background: str = "noise"
    frames: int = 5

    @property
    def num_instances(self) -> int:
        return len(self.sprites)


@dataclass
class DegradationConfig:
    mode: str = "BI"
    sigma: float = 1.6
    scale: int = SCALE

    def validate(self) -> None:
        if self.mode not in ("BI", "BD"):
            raise ValidationError(f"degradation mode must be BI or BD, got {self.mode!r}")
        if self.mode == "BD" and not self.sigma > 0:
            raise ValidationError("BD degradation needs sigma > 0")
        if self.scale != SCALE:
            raise ValidationError("only x4 scale is supported")


@dataclass
class VideoClip:
    hr: np.ndarray  # T,3,sH,sW
    lr: np.ndarray  # T,3,H,W
    labels: np.ndarray  # T,H,W (LR grid)
    degradation: str
    num_instances: int
    hr_labels: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return self.lr.shape[0]

    def crop(self, y: int, x: int, size_h: int, size_w: int) -> "VideoClip":
        s = SCALE
        return dataclasses.replace(
            self,
            hr=self.hr[:, :, y * s:(y + size_h) * s, x * s:(x + size_w) * s],
            lr=self.lr[:, :, y:y + size_h, x:x + size_w],
            labels=self.labels[:, y:y + size_h, x:x + size_w],
            hr_labels=None if self.hr_labels is None
            else self.hr_labels[:, y * s:(y + size_h) * s, x * s:(x + size_w) * s],
        )


# ----------------------------------------------------------------- rendering


def _shape_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    d = np.hypot(yy - c, xx - c)
    if kind == "rect":
        return np.ones((size, size), dtype=bool)
    if kind == "disc":
        return d <= c
    if kind == "ring":
        return (d <= c) & (d >= c / 2.0)
    raise ValidationError(f"unknown shape kind {kind!r}")


def _texture(kind: str, h: int, w: int, rng: Rng) -> np.ndarray:
    """Scalar pattern in [0,1], (h, w)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    if kind == "stripes":
        period = rng.uniform(4.0, 10.0)
        theta = rng.uniform(0.0, np.pi)
        u = yy * np.sin(theta) + xx * np.cos(theta)
        return (np.floor(2.0 * u / period) % 2).astype(float)
    if kind == "checker":
        cell = int(rng.integers(3, 8))
        return ((yy // cell + xx // cell) % 2).astype(float)
    if kind == "noise":
        cell = int(rng.integers(2, 5))
        coarse = rng.uniform(0.0, 1.0, (h // cell + 1, w // cell + 1))
        return np.kron(coarse, np.ones((cell, cell)))[:h, :w]
    raise ValidationError(f"unknown texture kind {kind!r}")


def _positions(sprite: Sprite, start: tuple[int, int], frames: int) -> list[tuple[int, int]]:
    vy, vx = sprite.velocity
    return [(int(math.floor(start[0] + vy * t)), int(math.floor(start[1] + vx * t))) for t in range(frames)]


def _visible_fraction(mask: np.ndarray, top: int, left: int, H: int, W: int) -> float:
    s = mask.shape[0]
    y0, y1 = max(top, 0), min(top + s, H)
    x0, x1 = max(left, 0), min(left + s, W)
    if y1 <= y0 or x1 <= x0:
        return 0.0
    vis = mask[y0 - top:y1 - top, x0 - left:x1 - left].sum()
    return float(vis) / float(mask.sum())


def validate_spec(spec: SceneSpec) -> None:
    if spec.height % SCALE or spec.width % SCALE:
        raise ValidationError(f"canvas {spec.height}x{spec.width} not divisible by {SCALE}")
    if spec.frames < 1:
        raise ValidationError("frame count must be >= 1")
    if spec.num_instances < 1:
        raise ValidationError("need at least one sprite")
    if spec.background not in TEXTURES:
        raise ValidationError(f"unknown background texture {spec.background!r}")
    for i, sp in enumerate(spec.sprites, start=1):
        if sp.shape not in SHAPES or sp.texture not in TEXTURES:
            raise ValidationError(f"sprite {i}: bad shape/texture ({sp.shape}, {sp.texture})")
        if not 1 <= sp.size < min(spec.height, spec.width):
            raise ValidationError(f"sprite {i}: size {sp.size} must be < canvas extents")


def _sprite_start(sp: SceneSpec, sprite: Sprite, rng: Rng) -> tuple[int, int]:
    if sprite.position is not None:
        return sprite.position
    # choose a start keeping the whole trajectory mostly on canvas
    s = sprite.size
    vy, vx = sprite.velocity
    T = sp.frames
    lo_y = max(0.0, -min(0.0, vy * (T - 1)))
    hi_y = sp.height - s - max(0.0, vy * (T - 1))
    lo_x = max(0.0, -min(0.0, vx * (T - 1)))
    hi_x = sp.width - s - max(0.0, vx * (T - 1))
    y = rng.uniform(lo_y, hi_y) if hi_y > lo_y else (sp.height - s) / 2.0
    x = rng.uniform(lo_x, hi_x) if hi_x > lo_x else (sp.width - s) / 2.0
    return int(y), int(x)


def render_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """HR frames (T,3,H,W) in [0,1] and HR label maps (T,H,W)."""
    validate_spec(spec)
    rng = Rng(seed)
    H, W, T = spec.height, spec.width, spec.frames
    bg_pat = _texture(spec.background, H, W, rng)
    base = rng.uniform(0.3, 0.55)
    tint = rng.uniform(-0.05, 0.05, 3)
    bg = (base + tint)[:, None, None] * (0.75 + 0.35 * bg_pat)[None]

    frames = np.repeat(bg[None], T, axis=0)
    labels = np.zeros((T, H, W), dtype=np.int64)
    for inst, sprite in enumerate(spec.sprites, start=1):
        mask = _shape_mask(sprite.shape, sprite.size)
        pat = _texture(sprite.texture, sprite.size, sprite.size, rng)
        if sprite.color is not None:
            color = np.asarray(sprite.color, dtype=float)
        else:
            color = CATEGORY_PALETTE[(inst - 1) % len(CATEGORY_PALETTE)] + rng.uniform(-0.08, 0.08, 3)
        color = np.clip(color, 0.0, 1.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        start = _sprite_start(spec, sprite, rng)
        traj = _positions(sprite, start, T)
        for t, (top, left) in enumerate(traj):
            if _visible_fraction(mask, top, left, H, W) < 0.5:
                raise ValidationError(
                    f"sprite {inst} is less than 50% on canvas at frame {t}")
            gain = 1.0 + sprite.light_amp * math.sin(2 * math.pi * t / sprite.light_period + phase)
            tex = color[:, None, None] * (0.45 + 0.55 * pat)[None] * gain
            y0, y1 = max(top, 0), min(top + sprite.size, H)
            x0, x1 = max(left, 0), min(left + sprite.size, W)
            m = mask[y0 - top:y1 - top, x0 - left:x1 - left]
            sub = tex[:, y0 - top:y1 - top, x0 - left:x1 - left]
            region = frames[t, :, y0:y1, x0:x1]
            region[:, m] = sub[:, m]
            labels[t, y0:y1, x0:x1][m] = inst
    return np.clip(frames, 0.0, 1.0), labels


def downsample_labels(hr_labels: np.ndarray, num_ids: int, s: int = SCALE) -> np.ndarray:
    """Per-cell majority vote; ties go to the higher id."""
    T, H, W = hr_labels.shape
    cells = hr_labels.reshape(T, H // s, s, W // s, s)
    counts = np.stack([(cells == k).sum(axis=(2, 4)) for k in range(num_ids + 1)], axis=-1)
    # argmax returns the first max, so scan ids from high to low
    return num_ids - np.argmax(counts[..., ::-1], axis=-1)


def generate_clip(spec: SceneSpec, seed: int, degradation: DegradationConfig | None = None) -> VideoClip:
    degradation = degradation or DegradationConfig()
    degradation.validate()
    hr, hr_labels = render_scene(spec, seed)
    lr = degrade(hr, degradation)
    labels = downsample_labels(hr_labels, spec.num_instances)
    return VideoClip(hr=hr, lr=lr, labels=labels, degradation=degradation.mode,
                     num_instances=spec.num_instances, hr_labels=hr_labels)


def random_scene(rng: Rng, lr_size: int = 32, frames: int = 5, num_instances: int = 2,
                 size_range: tuple[float, float] = (0.25, 0.45),
                 speed_range: tuple[float, float] = (1.0, 8.0)) -> SceneSpec:
    """Draw a scene whose sprites stay on canvas for every frame."""
    hr = lr_size * SCALE
    sprites = []
    for _ in range(num_instances):
        size = int(rng.uniform(*size_range) * hr)
        speed = rng.uniform(*speed_range)
        ang = rng.uniform(0.0, 2 * np.pi)
        max_speed = 0.5 * (hr - size) / max(frames - 1, 1)
        speed = min(speed, max_speed)
        sprites.append(Sprite(
            shape=SHAPES[int(rng.integers(0, 3))],
            texture=TEXTURES[int(rng.integers(0, 3))],
            size=size,
            velocity=(speed * math.sin(ang), speed * math.cos(ang)),
            light_amp=float(rng.uniform(0.0, 0.15)),
        ))
    return SceneSpec(height=hr, width=hr, sprites=sprites,
                     background=TEXTURES[int(rng.integers(0, 3))], frames=frames)


# --------------------------------------------------------------- resampling


def _reflect(j: int, n: int) -> int:
    # half-sample symmetric: -1 -> 0, n -> n-1
    period = 2 * n
    j %= period
    return j if j < n else period - 1 - j


def cubic_weight(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x <= 1.0:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1.0
    if x < 2.0:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom resampling matrix, half-pixel centres."""
    scale = n_in / n_out
    M = np.zeros((n_out, n_in))
    for o in range(n_out):
        c = (o + 0.5) * scale - 0.5
        base = math.floor(c)
        for j in range(base - 1, base + 3):
            w = cubic_weight(c - j)
            if w != 0.0:
                M[o, _reflect(j, n_in)] += w
    return M


def gaussian_kernel1d(sigma: float, radius: int | None = None) -> np.ndarray:
    if not sigma > 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    r = math.ceil(3 * sigma) if radius is None else radius
    x = np.arange(-r, r + 1, dtype=float)
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    g = gaussian_kernel1d(sigma, radius)
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur_matrix(n: int, sigma: float) -> np.ndarray:
    g = gaussian_kernel1d(sigma)
    r = len(g) // 2
    M = np.zeros((n, n))
    for o in range(n):
        for k, w in enumerate(g):
            M[o, _reflect(o + k - r, n)] += w
    return M


def degradation_matrix(n_hr: int, cfg: DegradationConfig) -> np.ndarray:
    if n_hr % cfg.scale:
        raise DimensionError(f"extent {n_hr} not divisible by {cfg.scale}")
    n_lr = n_hr // cfg.scale
    if cfg.mode == "BI":
        return bicubic_matrix(n_hr, n_lr)
    return gaussian_blur_matrix(n_hr, cfg.sigma)[::cfg.scale]


def degrade(hr: np.ndarray, cfg: DegradationConfig | None = None) -> np.ndarray:
    """(…,3,sH,sW) -> (…,3,H,W) by separable BI or BD resampling."""
    cfg = cfg or DegradationConfig()
    cfg.validate()
    hr = np.asarray(hr.data if isinstance(hr, Tensor) else hr, dtype=float)
    Mh = degradation_matrix(hr.shape[-2], cfg)
    Mw = degradation_matrix(hr.shape[-1], cfg)
    return np.einsum("ah,...hw,bw->...ab", Mh, hr, Mw)


def bicubic_resize(x, out_h: int, out_w: int) -> Tensor:
    """Differentiable Catmull-Rom resize of a (C,H,W) tensor."""
    if out_h < 1 or out_w < 1:
        raise DimensionError("output extents must be >= 1")
    x = as_tensor(x)
    _, H, W = x.shape
    Rh = Tensor(bicubic_matrix(H, out_h))
    RwT = Tensor(bicubic_matrix(W, out_w).T)
    return matmul(matmul(Rh, x), RwT)


# ---------------------------------------------------------------------- I/O


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_ppm(img, path) -> None:
    img = np.asarray(img.data if isinstance(img, Tensor) else img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"write_ppm expects (3,H,W), got {img.shape}")
    _, H, W = img.shape
    body = _quantize(img).transpose(1, 2, 0).tobytes()
    _atomic_write(Path(path), f"P6\n{W} {H}\n255\n".encode() + body)


def write_pgm(img, path) -> None:
    img = np.asarray(img.data if isinstance(img, Tensor) else img)
    if img.ndim != 2:
        raise DimensionError(f"write_pgm expects (H,W), got {img.shape}")
    H, W = img.shape
    _atomic_write(Path(path), f"P5\n{W} {H}\n255\n".encode() + _quantize(img).tobytes())


def _parse_netpbm(raw: bytes, magic: bytes) -> tuple[int, int, int]:
    """Return (width, height, data offset)."""
    if raw[:2] != magic:
        raise ParseError(f"expected magic {magic.decode()}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError("malformed header field", start)
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after header", pos)
    pos += 1
    W, H, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", pos)
    return W, H, pos


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    W, H, off = _parse_netpbm(raw, b"P6")
    need = W * H * 3
    if len(raw) - off < need:
        raise ParseError(f"truncated pixel data: need {need} bytes", len(raw))
    px = np.frombuffer(raw, dtype=np.uint8, count=need, offset=off)
    return px.reshape(H, W, 3).transpose(2, 0, 1).astype(float) / 255.0


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    W, H, off = _parse_netpbm(raw, b"P5")
    if len(raw) - off < W * H:
        raise ParseError(f"truncated pixel data: need {W * H} bytes", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=W * H, offset=off).reshape(H, W) / 255.0


LABEL_MAGIC = b"SLLM"
LABEL_VERSION = 1


def write_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    H, W = labels.shape
    if labels.min() < 0 or labels.max() > 0xFFFF:
        raise ValidationError("label ids must fit in uint16")
    header = LABEL_MAGIC + struct.pack("<III", LABEL_VERSION, H, W)
    _atomic_write(Path(path), header + labels.astype("<u2").tobytes())


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ParseError("label file shorter than header", len(raw))
    if raw[:4] != LABEL_MAGIC:
        raise ParseError("bad label magic", 0)
    version, H, W = struct.unpack_from("<III", raw, 4)
    if version != LABEL_VERSION:
        raise ParseError(f"unsupported label version {version}", 4)
    if len(raw) - 16 != 2 * H * W:
        raise ParseError(f"label payload size mismatch for {H}x{W}", 16)
    return np.frombuffer(raw, dtype="<u2", offset=16).reshape(H, W).astype(np.int64)


# ------------------------------------------------------------------ dataset

MANIFEST = "manifest.tsv"


@dataclass
class DatasetSpec:
    n_clips: int = 8
    n_val: int = 2
    lr_size: int = 32
    frames: int = 5
    num_instances: int = 2
    size_range: tuple[float, float] = (0.25, 0.45)
    speed_range: tuple[float, float] = (1.0, 8.0)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)


def make_clip(ds: DatasetSpec, seed: int) -> VideoClip:
    rng = Rng(seed)
    scene = random_scene(rng, ds.lr_size, ds.frames, ds.num_instances, ds.size_range, ds.speed_range)
    return generate_clip(scene, int(rng.integers(0, 2 ** 63)), ds.degradation)


def save_clip(clip: VideoClip, folder) -> None:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    for t in range(clip.frames):
        write_ppm(clip.hr[t], folder / f"hr_{t:02d}.ppm")
        write_ppm(clip.lr[t], folder / f"lr_{t:02d}.ppm")
        write_labels(clip.labels[t], folder / f"labels_{t:02d}.sllm")
    meta = (f"frames={clip.frames}\ndegradation={clip.degradation}\n"
            f"num_instances={clip.num_instances}\n")
    _atomic_write(folder / "clip.meta", meta.encode())


def load_clip(folder) -> VideoClip:
    folder = Path(folder)
    meta_path = folder / "clip.meta"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing clip metadata: {meta_path}")
    meta = dict(line.split("=", 1) for line in meta_path.read_text().splitlines() if line)
    T = int(meta["frames"])
    hr = np.stack([read_ppm(folder / f"hr_{t:02d}.ppm") for t in range(T)])
    lr = np.stack([read_ppm(folder / f"lr_{t:02d}.ppm") for t in range(T)])
    labels = np.stack([read_labels(folder / f"labels_{t:02d}.sllm") for t in range(T)])
    return VideoClip(hr=hr, lr=lr, labels=labels, degradation=meta["degradation"],
                     num_instances=int(meta["num_instances"]))


def split_assignment(n_clips: int, n_val: int, seed: int) -> list[str]:
    if not 0 <= n_val <= n_clips:
        raise ValidationError(f"n_val={n_val} outside [0, {n_clips}]")
    order = Rng(seed).spawn(0xA11).gen.permutation(n_clips)
    splits = ["train"] * n_clips
    for i in order[:n_val]:
        splits[int(i)] = "val"
    return splits


def make_dataset(out_dir, ds: DatasetSpec, seed: int) -> Path:
    """Write clips and a ``clip_id<TAB>split<TAB>path`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(seed)
    splits = split_assignment(ds.n_clips, ds.n_val, seed)
    lines = []
    for i in range(ds.n_clips):
        clip_id = f"clip_{i:04d}"
        rel = f"clips/{clip_id}"
        try:
            save_clip(make_clip(ds, root.spawn(i).seed), out / rel)
        except OSError as exc:
            raise OSError(f"failed writing {out / rel}: {exc}") from exc
        lines.append(f"{clip_id}\t{splits[i]}\t{rel}\n")
    _atomic_write(out / MANIFEST, "".join(lines).encode("utf-8"))
    return out


def read_manifest(root) -> list[tuple[str, str, str]]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"missing manifest: {path}")
    rows = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"{path}:{n}: expected 3 tab-separated fields")
        rows.append((parts[0], parts[1], parts[2]))
    return rows


def load_split(root, split: str) -> list[tuple[str, VideoClip]]:
    root = Path(root)
    return [(cid, load_clip(root / rel)) for cid, sp, rel in read_manifest(root) if sp == split]
