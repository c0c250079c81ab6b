"""IMAGE: pre-alignment of supporting-frame features to a reference frame by
local-window attention restricted to pixels of the same instance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import DimensionError, Module, Rng, Tensor, window_offsets


@dataclass
class WindowSpec:
    radius: int = 3
    heads: int = 1

    @property
    def taps(self) -> int:
        return (2 * self.radius + 1) ** 2


def build_attention_mask(ref_labels: np.ndarray, sup_labels: np.ndarray, spec: WindowSpec,
                         center_always_allowed: bool = True) -> np.ndarray:
    """Additive (H,W,K) mask: 0 where the reference pixel and the supporting
    pixel at that window tap carry the same id, -inf otherwise (including
    taps that fall off the canvas)."""
    ref_labels = np.asarray(ref_labels)
    sup_labels = np.asarray(sup_labels)
    if ref_labels.shape != sup_labels.shape:
        raise DimensionError(f"label maps differ: {ref_labels.shape} vs {sup_labels.shape}")
    H, W = ref_labels.shape
    r = spec.radius
    padded = np.pad(sup_labels, r, constant_values=-1)
    offs = window_offsets(r)
    taps = np.stack([padded[r + dy:r + dy + H, r + dx:r + dx + W] for dy, dx in offs], axis=-1)
    allowed = taps == ref_labels[..., None]
    if center_always_allowed:
        allowed[..., len(offs) // 2] = True
    return np.where(allowed, 0.0, -np.inf)


def unmasked_window_mask(H: int, W: int, spec: WindowSpec) -> np.ndarray:
    """Only off-canvas taps are excluded."""
    return build_attention_mask(np.zeros((H, W), int), np.zeros((H, W), int), spec)


def masked_local_attention(ref: Tensor, sup: Tensor, mask: np.ndarray, spec: WindowSpec,
                           wq: Tensor, wk: Tensor, wv: Tensor, scaled: bool = False,
                           return_attention: bool = False, offset_bias: Tensor | None = None):
    """Reference pixels query the (2r+1)^2 window of the supporting frame.

    ``ref``/``sup`` are (C,H,W); projections are (C,C) applied as x @ W.
    Logits are unscaled unless ``scaled``. ``offset_bias`` (K,) is an
    optional learned logit per window tap, shared by all pixels.
    """
    C, H, W = ref.shape
    if sup.shape != ref.shape:
        raise DimensionError(f"feature shapes differ: {ref.shape} vs {sup.shape}")
    K = spec.taps
    if mask.shape != (H, W, K):
        raise DimensionError(f"mask {mask.shape} vs expected {(H, W, K)}")
    pix = nc.transpose(ref, (1, 2, 0))  # H,W,C
    q = nc.reshape(nc.matmul(pix, wq), (H, W, 1, C))
    win = nc.local_windows(sup, spec.radius)  # H,W,K,C
    k = nc.matmul(win, wk)
    v = nc.matmul(win, wv)
    logits = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2)))  # H,W,1,K
    if scaled:
        logits = logits * (1.0 / np.sqrt(C))
    if offset_bias is not None:
        logits = logits + offset_bias
    attn = nc.softmax_lastdim(logits, mask.reshape(H, W, 1, K))
    out = nc.reshape(nc.matmul(attn, v), (H, W, C))
    out = nc.transpose(out, (2, 0, 1))
    if return_attention:
        return out, attn
    return out


class ImageAlign(Module):
    def __init__(self, rng: Rng, width: int, spec: WindowSpec | None = None, scaled: bool = False,
                 locality: float = 1.0):
        self.spec = spec or WindowSpec()
        self.scaled = scaled
        # locality > 0 adds a learned per-tap logit starting at -locality * |offset|^2,
        # so alignment begins close to the zero-offset warp
        d2 = (window_offsets(self.spec.radius) ** 2).sum(axis=1).astype(float)
        self.offset_bias = nc.param(-locality * d2) if locality > 0 else None
        # identity init: logits start as raw feature similarity between frames
        self.wq = nc.param(np.eye(width))
        self.wk = nc.param(np.eye(width))
        self.wv = nc.param(np.eye(width))

    def __call__(self, ref: Tensor, sup: Tensor, ref_labels: np.ndarray, sup_labels: np.ndarray) -> Tensor:
        mask = build_attention_mask(ref_labels, sup_labels, self.spec)
        return masked_local_attention(ref, sup, mask, self.spec, self.wq, self.wk, self.wv, self.scaled,
                                      offset_bias=self.offset_bias)


def prealign_clip(features: list[Tensor], labels: np.ndarray, t_ref: int, align: ImageAlign) -> list[Tensor]:
    """Replace every supporting frame by its alignment to ``t_ref``."""
    out = []
    for t, f in enumerate(features):
        if t == t_ref:
            out.append(f)
        else:
            out.append(align(features[t_ref], f, labels[t_ref], labels[t]))
    return out
