"""Pixel enhancer: bidirectional second-order propagation through
(IMAGE -> fuse -> SPACE -> MFSAB) units and a x4 pixel-shuffle head."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .image_align import ImageAlign, WindowSpec
from .layers import Conv3x3, FeedForward, LayerNorm, MultiHeadAttention
from .numcore import Module, Rng, Tensor
from .semantics import SemanticBundle
from .space import SpaceBlock
from .synthvid import SCALE, bicubic_resize

BRANCHES = ("backward_1", "forward_1", "backward_2", "forward_2")


@dataclass
class EnhancerConfig:
    width: int = 16
    blocks: int = 2
    heads: int = 2
    win: int = 8
    mlp_ratio: int = 2
    radius: int = 3
    isee_heads: int = 1
    isee_scaling: bool = True
    image_scaling: bool = False
    image_locality: float = 1.0
    space_every_block: bool = False
    use_gps: bool = True
    use_isee: bool = True
    use_image: bool = True

    @property
    def use_space(self) -> bool:
        return self.use_gps or self.use_isee


# ------------------------------------------------------------------ windows


def window_partition(x: Tensor, win: int) -> Tensor:
    """(S,C,Hp,Wp) -> (nW, S*win*win, C); windows row-major over the canvas."""
    S, C, H, W = x.shape
    nh, nw = H // win, W // win
    t = nc.transpose(x, (0, 2, 3, 1))
    t = nc.reshape(t, (S, nh, win, nw, win, C))
    t = nc.transpose(t, (1, 3, 0, 2, 4, 5))
    return nc.reshape(t, (nh * nw, S * win * win, C))


def window_reverse(w: Tensor, win: int, S: int, H: int, W: int) -> Tensor:
    C = w.shape[-1]
    nh, nw = H // win, W // win
    t = nc.reshape(w, (nh, nw, S, win, win, C))
    t = nc.transpose(t, (2, 0, 3, 1, 4, 5))
    t = nc.reshape(t, (S, H, W, C))
    return nc.transpose(t, (0, 3, 1, 2))


@functools.lru_cache(maxsize=64)
def shifted_window_mask(H: int, W: int, win: int, shift: int, frames: int) -> np.ndarray:
    """Additive (nW,1,N,N) mask keeping attention inside contiguous regions
    after a cyclic shift."""
    region = np.zeros((H, W), dtype=int)
    cuts = (slice(0, -win), slice(-win, -shift), slice(-shift, None))
    n = 0
    for hs in cuts:
        for ws in cuts:
            region[hs, ws] = n
            n += 1
    nh, nw = H // win, W // win
    reg = region.reshape(nh, win, nw, win).transpose(0, 2, 1, 3).reshape(nh * nw, win * win)
    reg = np.tile(reg, (1, frames))
    return np.where(reg[:, :, None] == reg[:, None, :], 0.0, -np.inf)[:, None]


class Mfsab(Module):
    """Pre-norm joint self-attention over all frames inside each spatial
    window, then a feed-forward layer; both residual."""

    def __init__(self, rng: Rng, width: int, heads: int = 2, win: int = 8, ratio: int = 2,
                 shifted: bool = False, zero_out: bool = False):
        self.win = win
        self.shifted = shifted
        self.norm1 = LayerNorm(width)
        self.attn = MultiHeadAttention(rng, width, heads, out_zero=zero_out)
        self.norm2 = LayerNorm(width)
        self.ffn = FeedForward(rng, width, ratio, out_zero=zero_out)
        self._last_attn: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        S, C, H, W = x.shape
        win = min(self.win, H, W)
        ph, pw = (-H) % win, (-W) % win
        xp = nc.pad_hw(x, ph, pw, "reflect")
        Hp, Wp = H + ph, W + pw
        shift = win // 2 if self.shifted and win < max(Hp, Wp) and win > 1 else 0
        mask = None
        if shift:
            xp = nc.roll(xp, (-shift, -shift), (2, 3))
            mask = shifted_window_mask(Hp, Wp, win, shift, S)
        tokens = window_partition(xp, win)
        h = self.norm1(tokens)
        tokens = tokens + self.attn(h, h, mask)
        self._last_attn = self.attn._last_attn
        tokens = tokens + self.ffn(self.norm2(tokens))
        out = window_reverse(tokens, win, S, Hp, Wp)
        if shift:
            out = nc.roll(out, (shift, shift), (2, 3))
        if ph or pw:
            out = out[:, :, :H, :W]
        return out


def mfsab_forward(features: Tensor, block: Mfsab) -> Tensor:
    return block(features)


# -------------------------------------------------------------- propagation


class Branch(Module):
    def __init__(self, rng: Rng, cfg: EnhancerConfig):
        C = cfg.width
        self.cfg = cfg
        # keyed child streams: toggling a component leaves the others' init unchanged
        self.image = ImageAlign(rng.spawn(1), C, WindowSpec(cfg.radius), cfg.image_scaling, cfg.image_locality) \
            if cfg.use_image else None
        self.fuse_w = nc.param(rng.spawn(2).normal((C, 3 * C), std=0.5 / np.sqrt(3 * C)))
        self.fuse_b = nc.param(np.zeros(C))
        self.space = [SpaceBlock(rng.spawn(100 + b), C, cfg.isee_heads, cfg.isee_scaling, cfg.use_gps, cfg.use_isee)
                      for b in range(cfg.blocks if cfg.space_every_block else 1)] if cfg.use_space else []
        self.blocks = [Mfsab(rng.spawn(200 + b), C, cfg.heads, cfg.win, cfg.mlp_ratio, shifted=bool(b % 2))
                       for b in range(cfg.blocks)]

    def unit(self, x: Tensor, preds: list[tuple[Tensor, int]], t: int,
             bundle: SemanticBundle | None, labels: np.ndarray | None) -> Tensor:
        """One propagation step for frame ``t`` given (features, frame) of the
        order-1 and order-2 predecessors along the branch."""
        C, H, W = x.shape
        aligned = []
        for feat, tp in preds:
            if self.image is not None:
                feat = self.image(x, feat, labels[t], labels[tp])
            aligned.append(feat)
        slots = aligned + [nc.Tensor(np.zeros((C, H, W)))] * (2 - len(aligned))
        fused = x + nc.conv1x1(nc.concat([x] + slots, axis=0), self.fuse_w, self.fuse_b)
        tokens = bundle.isee_tokens() if bundle is not None and self.space else None
        stack = nc.stack([fused] + aligned) if aligned else nc.reshape(fused, (1, C, H, W))
        for b, block in enumerate(self.blocks):
            if self.space and (b == 0 or self.cfg.space_every_block):
                sp = self.space[b if self.cfg.space_every_block else 0]
                cur = sp(stack[0], bundle.global_tokens[t], tokens).features
                stack = nc.concat([nc.reshape(cur, (1, C, H, W)), stack[1:]], axis=0) if stack.shape[0] > 1 \
                    else nc.reshape(cur, (1, C, H, W))
            stack = block(stack)
        return stack[0]

    def __call__(self, feats: list[Tensor], order: list[int], bundle, labels,
                 stop_at: int | None = None) -> list[Tensor | None]:
        outs: dict[int, Tensor] = {}
        for k, t in enumerate(order):
            preds = [(outs[order[k - j]], order[k - j]) for j in (1, 2) if k - j >= 0]
            outs[t] = self.unit(feats[t], preds, t, bundle, labels)
            if t == stop_at:
                break
        return [outs.get(t) for t in range(len(feats))]


class ReconstructionHead(Module):
    def __init__(self, rng: Rng, width: int):
        self.up1 = Conv3x3(rng, width, 4 * width)
        self.up2 = Conv3x3(rng, width, 4 * width)
        self.out = Conv3x3(rng, width, 3, zero=True)

    def __call__(self, feats: Tensor) -> Tensor:
        x = nc.relu(nc.pixel_shuffle(self.up1(feats), 2))
        x = nc.relu(nc.pixel_shuffle(self.up2(x), 2))
        return self.out(x)


def reconstruct(head: ReconstructionHead, feats: Tensor, lr_ref) -> Tensor:
    """Head output plus the bicubic x4 of the LR reference frame (unclamped)."""
    lr_ref = nc.as_tensor(lr_ref)
    _, H, W = lr_ref.shape
    return head(feats) + bicubic_resize(lr_ref, SCALE * H, SCALE * W)


class Enhancer(Module):
    def __init__(self, rng: Rng, cfg: EnhancerConfig):
        C = cfg.width
        self.cfg = cfg
        self.stem1 = Conv3x3(rng.spawn(1), 3, C)
        self.stem2 = Conv3x3(rng.spawn(2), C, C)
        self.branches = [Branch(rng.spawn(10 + n), cfg) for n in range(len(BRANCHES))]
        self.head = ReconstructionHead(rng.spawn(3), C)

    def propagate(self, lr: Tensor, bundle: SemanticBundle | None,
                  t_ref: int | None = None) -> list[Tensor | None]:
        """Final features per frame; with ``t_ref`` the last branch stops once
        the reference frame is done (later entries are None)."""
        T = lr.shape[0]
        x = self.stem2(nc.relu(self.stem1(lr)))
        feats = [x[t] for t in range(T)]
        labels = bundle.labels if bundle is not None else None
        for n, (name, branch) in enumerate(zip(BRANCHES, self.branches)):
            order = list(range(T - 1, -1, -1)) if name.startswith("backward") else list(range(T))
            stop = t_ref if n == len(self.branches) - 1 else None
            feats = branch(feats, order, bundle, labels, stop)
        return feats

    def __call__(self, lr, bundle: SemanticBundle | None, t_ref: int) -> Tensor:
        lr = nc.as_tensor(lr)
        if not 0 <= t_ref < lr.shape[0]:
            raise IndexError(f"t_ref {t_ref} outside [0, {lr.shape[0]})")
        feats = self.propagate(lr, bundle, t_ref)
        return reconstruct(self.head, feats[t_ref], lr[t_ref])
