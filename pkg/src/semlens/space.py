"""SPACE block: global-token feature modulation (GPS) followed by
instance-token cross-attention (ISEE)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .layers import Conv3x3, Linear, attention, merge_heads, split_heads
from .numcore import DimensionError, Module, Rng, Tensor


def gps_extend(token: Tensor, feats: Tensor) -> Tensor:
    """Broadcast the (C,) global token over (C,H,W) features channel-wise."""
    if token.shape != (feats.shape[0],):
        raise DimensionError(f"global token {token.shape} vs feature width {feats.shape[0]}")
    return feats * nc.reshape(token, (-1, 1, 1))


class Gps(Module):
    """Two 3x3 convs with a ReLU between; the second emits (gamma, beta) and
    starts at zero so the block is an identity at init."""

    def __init__(self, rng: Rng, width: int):
        self.width = width
        self.conv1 = Conv3x3(rng, width, width)
        self.conv2 = Conv3x3(rng, width, 2 * width, zero=True)

    def affine(self, extended: Tensor) -> tuple[Tensor, Tensor]:
        gb = self.conv2(nc.relu(self.conv1(extended)))
        return gb[:self.width], gb[self.width:]

    def __call__(self, feats: Tensor, token: Tensor) -> Tensor:
        gamma, beta = self.affine(gps_extend(token, feats))
        return gps_modulate(feats, gamma, beta)


def gps_modulate(feats: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return feats * gamma + beta + feats


class Isee(Module):
    """Pixels query instance tokens; the attended values are added back to
    the pixel features (value projection starts at zero)."""

    def __init__(self, rng: Rng, width: int, heads: int = 1, scaled: bool = True):
        self.heads = heads
        self.scaled = scaled
        self.wq = Linear(rng, width, width, bias=False)
        self.wk = Linear(rng, width, width, bias=False)
        self.wv = Linear(rng, width, width, bias=False, zero=True)

    def __call__(self, feats: Tensor, tokens: Tensor) -> tuple[Tensor, Tensor]:
        C, H, W = feats.shape
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValueError("ISEE needs at least one instance token")
        if tokens.shape[1] != C:
            raise DimensionError(f"token width {tokens.shape[1]} vs feature width {C}")
        pix = nc.transpose(nc.reshape(feats, (C, H * W)), (1, 0))  # HW,C
        q = split_heads(self.wq(pix), self.heads)
        k = split_heads(self.wk(tokens), self.heads)
        v = split_heads(self.wv(tokens), self.heads)
        out, attn = attention(q, k, v, scale=self.scaled)
        out = merge_heads(out)  # HW,C
        aligned = nc.reshape(nc.transpose(out, (1, 0)), (C, H, W))
        return feats + aligned, attn


@dataclass
class SpaceOutput:
    modulated: Tensor
    features: Tensor
    attention: Tensor | None


class SpaceBlock(Module):
    def __init__(self, rng: Rng, width: int, heads: int = 1, scaled: bool = True,
                 use_gps: bool = True, use_isee: bool = True):
        self.use_gps = use_gps
        self.use_isee = use_isee
        self.gps = Gps(rng.spawn(1), width) if use_gps else None
        self.isee = Isee(rng.spawn(2), width, heads, scaled) if use_isee else None
        self._last_attn: Tensor | None = None

    def __call__(self, feats: Tensor, global_token: Tensor, tokens: Tensor) -> SpaceOutput:
        mod = self.gps(feats, global_token) if self.gps is not None else feats
        attn = None
        out = mod
        if self.isee is not None:
            out, attn = self.isee(mod, tokens)
        self._last_attn = attn
        return SpaceOutput(mod, out, attn)


def space_forward(feats: Tensor, global_token: Tensor, tokens: Tensor, block: SpaceBlock) -> SpaceOutput:
    return block(feats, global_token, tokens)
