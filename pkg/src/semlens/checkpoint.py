"""Binary checkpoint container.

Layout (little-endian)::

    b"SLCKPT1\\0" | u32 count | count x entry
    entry   = u32 name_len | name utf-8 | u8 dtype (0 = f64) | u32 rank | u32 dims[rank] | f64 payload
    optim   = u64 step | u32 count | count x entry   (names "m:<param>", "v:<param>")
    rng     = u32 len | bytes
    config  = u32 len | canonical config text
    digest  = 32-byte SHA-256 of the canonical config text
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SLCKPT1\0"
DTYPE_F64 = 0


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int = 0
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: bytes = b""
    config_text: str = ""

    @property
    def config_hash(self) -> bytes:
        return hashlib.sha256(self.config_text.encode("utf-8")).digest()

    def restore(self, model, opt=None, rng=None) -> None:
        model.load_state_dict(self.params)
        if opt is not None:
            opt.step_count = self.step
            for name in opt.m:
                if f"m:{name}" in self.moments:
                    opt.m[name] = self.moments[f"m:{name}"].copy()
                    opt.v[name] = self.moments[f"v:{name}"].copy()
        if rng is not None and self.rng_state:
            rng.set_state(self.rng_state)


def _pack_entries(entries: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BI", DTYPE_F64, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def entries(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            dtype, rank = self.unpack("<BI")
            if dtype != DTYPE_F64:
                raise CheckpointError(f"{name}: unsupported dtype tag {dtype}")
            dims = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        return out


def encode(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config_text.encode("utf-8")
    return b"".join([
        MAGIC,
        _pack_entries(ckpt.params),
        struct.pack("<Q", ckpt.step),
        _pack_entries(ckpt.moments),
        struct.pack("<I", len(ckpt.rng_state)), ckpt.rng_state,
        struct.pack("<I", len(cfg)), cfg,
        ckpt.config_hash,
    ])


def decode(raw: bytes) -> Checkpoint:
    rd = _Reader(raw)
    if rd.take(8) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    params = rd.entries()
    (step,) = rd.unpack("<Q")
    moments = rd.entries()
    (n,) = rd.unpack("<I")
    rng_state = rd.take(n)
    (n,) = rd.unpack("<I")
    config_text = rd.take(n).decode("utf-8")
    digest = rd.take(32)
    ckpt = Checkpoint(params, step, moments, rng_state, config_text)
    if digest != ckpt.config_hash:
        raise CheckpointError("config digest does not match stored config text")
    if rd.pos != len(raw):
        raise CheckpointError(f"trailing bytes after offset {rd.pos}")
    return ckpt


def save_checkpoint(path, model, opt=None, rng=None, cfg=None) -> Checkpoint:
    from .synthvid import _atomic_write

    moments = {}
    step = 0
    if opt is not None:
        step = opt.step_count
        for name in opt.m:
            moments[f"m:{name}"] = opt.m[name]
            moments[f"v:{name}"] = opt.v[name]
    ckpt = Checkpoint(
        params=model.state_dict(), step=step, moments=moments,
        rng_state=rng.get_state() if rng is not None else b"",
        config_text=cfg.canonical() if cfg is not None else "",
    )
    _atomic_write(Path(path), encode(ckpt))
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return decode(p.read_bytes())


def check_config(ckpt: Checkpoint, cfg, force: bool = False) -> None:
    if ckpt.config_hash != cfg.sha256() and not force:
        raise ConfigMismatch("checkpoint config hash differs from the run config (use --force to override)")
