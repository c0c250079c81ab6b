"""Flat ``key=value`` run configuration with typed defaults."""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any

from .synthvid import DatasetSpec, DegradationConfig, ValidationError

# key -> default; the default's type is the parse type
DEFAULTS: dict[str, Any] = {
    "data.n_clips": 8,
    "data.n_val": 2,
    "data.lr_size": 32,
    "data.frames": 5,
    "data.num_instances": 2,
    "data.size_min": 0.25,
    "data.size_max": 0.45,
    "data.speed_min": 1.0,
    "data.speed_max": 8.0,
    "degradation.mode": "BI",
    "degradation.sigma": 1.6,
    "model.C": 16,
    "model.C_s": 32,
    "model.blocks": 2,
    "model.heads": 2,
    "model.win": 8,
    "model.mlp_ratio": 2,
    "model.r": 3,
    "model.w": 2,
    "model.shift": 1,
    "model.N_f": 3,
    "model.N_v": 3,
    "model.N_c": 4,
    "model.isee_heads": 1,
    "model.space_every_block": False,
    "model.isee_scaling": True,
    "model.image_scaling": False,
    "model.image_locality": 1.0,
    "model.use_gps": True,
    "model.use_isee": True,
    "model.use_image": True,
    "train.lr": 2e-4,
    "train.lr_min": 1e-6,
    "train.steps": 300,
    "train.seed": 0,
    "train.eps": 1e-3,
    "train.lambda_mask": 0.1,
    "train.extractor_mode": "oracle",
    "train.extractor_steps": 200,
    "train.extractor_lr": 2e-3,
    "train.patch": 32,
    "train.weight_decay": 1e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.99,
    "train.eval_every": 0,
    "train.ckpt_every": 0,
    "train.log_every": 25,
    "eval.split": "val",
}

CHOICES = {
    "degradation.mode": ("BI", "BD"),
    "train.extractor_mode": ("oracle", "learned"),
    "eval.split": ("train", "val"),
}


def _parse_value(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValidationError(f"config key {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class RunConfig:
    """Validated mapping over :data:`DEFAULTS`; unknown keys are rejected."""

    def __init__(self, overrides: dict[str, Any] | None = None):
        self.values = dict(DEFAULTS)
        for key, val in (overrides or {}).items():
            self.set(key, val)
        self.validate()

    def set(self, key: str, val: Any) -> None:
        if key not in DEFAULTS:
            raise ValidationError(f"unknown config key: {key}")
        self.values[key] = _parse_value(key, val) if isinstance(val, str) else val

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def replace(self, **overrides) -> "RunConfig":
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in overrides.items()})
        return RunConfig(vals)

    def with_values(self, mapping: dict[str, Any]) -> "RunConfig":
        vals = dict(self.values)
        vals.update(mapping)
        return RunConfig(vals)

    def validate(self) -> None:
        v = self.values
        for key, opts in CHOICES.items():
            if v[key] not in opts:
                raise ValidationError(f"config key {key}: {v[key]!r} not in {opts}")
        if v["model.N_v"] != v["model.N_f"]:
            raise ValidationError("model.N_v must equal model.N_f (one video token per frame slot)")
        if v["model.N_f"] < v["data.num_instances"]:
            raise ValidationError("model.N_f must cover data.num_instances")
        if v["model.C"] % v["model.heads"] or v["model.C"] % v["model.isee_heads"]:
            raise ValidationError("model.C must be divisible by head counts")
        if v["train.eps"] <= 0:
            raise ValidationError("train.eps must be > 0")
        if v["train.lambda_mask"] < 0:
            raise ValidationError("train.lambda_mask must be >= 0")
        if v["train.patch"] > v["data.lr_size"]:
            raise ValidationError("train.patch exceeds data.lr_size")
        for key in ("model.r", "model.shift", "train.steps", "model.image_locality"):
            if v[key] < 0:
                raise ValidationError(f"{key} must be >= 0")
        for key in ("model.w", "model.win", "model.C", "model.C_s", "model.blocks", "data.frames"):
            if v[key] < 1:
                raise ValidationError(f"{key} must be >= 1")

    def canonical(self) -> str:
        out = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            elif isinstance(val, float):
                val = repr(val)
            out.append(f"{key}={val}\n")
        return "".join(out)

    def sha256(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()

    def dataset_spec(self) -> DatasetSpec:
        v = self.values
        return DatasetSpec(
            n_clips=v["data.n_clips"], n_val=v["data.n_val"], lr_size=v["data.lr_size"],
            frames=v["data.frames"], num_instances=v["data.num_instances"],
            size_range=(v["data.size_min"], v["data.size_max"]),
            speed_range=(v["data.speed_min"], v["data.speed_max"]),
            degradation=DegradationConfig(mode=v["degradation.mode"], sigma=v["degradation.sigma"]),
        )


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    overrides = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{n}: expected key=value")
        key, val = line.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ValidationError(f"{source}:{n}: unknown config key: {key}")
        overrides[key] = _parse_value(key, val)
    return RunConfig(overrides)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))
