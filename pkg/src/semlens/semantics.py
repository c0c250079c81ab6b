"""Semantic extractor: frame encoder/decoder, temporal instance encoder,
video-query instance decoder, mask head, plus the ground-truth oracle path."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numcore as nc
from .layers import Conv3x3, FeedForward, LayerNorm, Linear, MultiHeadAttention, attention
from .numcore import Module, Rng, Tensor


@dataclass
class SemanticBundle:
    """Per-frame global tokens, video-wise instance tokens and label maps."""

    global_tokens: Tensor  # (T, width)
    instance_tokens: Tensor  # (N_v, width)
    background_token: Tensor  # (width,)
    labels: np.ndarray  # (T, H, W) exclusive ids, 0 = background
    mask_logits: Tensor | None = None  # (T, N_v, H, W)

    @property
    def width(self) -> int:
        return self.global_tokens.shape[-1]

    @property
    def frames(self) -> int:
        return self.global_tokens.shape[0]

    def isee_tokens(self) -> Tensor:
        """Instance tokens with the background token appended as the last row."""
        return nc.concat([self.instance_tokens, nc.reshape(self.background_token, (1, -1))], axis=0)

    def binary_masks(self) -> np.ndarray:
        """(T, N_v, H, W) sigmoid(logit) > 0.5, or label-derived when no logits."""
        if self.mask_logits is not None:
            return self.mask_logits.data > 0.0
        n = self.instance_tokens.shape[0]
        return np.stack([self.labels == i for i in range(1, n + 1)], axis=1)

    def frame(self, t: int) -> "SemanticBundle":
        return replace(self, global_tokens=self.global_tokens[t:t + 1], labels=self.labels[t:t + 1],
                       mask_logits=None if self.mask_logits is None else self.mask_logits[t:t + 1])


# ---------------------------------------------------------------- frame level


class FrameEncoder(Module):
    """Three 3x3 convs at stride 1: (T,3,H,W) -> (T,C_s,H,W)."""

    def __init__(self, rng: Rng, width: int):
        self.c1 = Conv3x3(rng, 3, width)
        self.c2 = Conv3x3(rng, width, width)
        self.c3 = Conv3x3(rng, width, width)

    def __call__(self, frames: Tensor) -> Tensor:
        x = nc.relu(self.c1(frames))
        x = nc.relu(self.c2(x))
        return self.c3(x)


class FrameDecoder(Module):
    """Queries cross-attend to pixel features; the last output row is the
    frame's global token. Learned class embeddings join the query
    self-attention and are dropped from the output."""

    def __init__(self, rng: Rng, width: int, n_inst: int, n_cls: int, blocks: int = 2):
        self.queries = nc.param(rng.normal((n_inst + 1, width), std=1.0))
        self.classes = nc.param(rng.normal((n_cls, width), std=1.0))
        self.cross = [MultiHeadAttention(rng, width) for _ in range(blocks)]
        self.cross_norm = [LayerNorm(width) for _ in range(blocks)]
        self.self_attn = [MultiHeadAttention(rng, width) for _ in range(blocks)]
        self.self_norm = [LayerNorm(width) for _ in range(blocks)]
        self.pixel = Linear(rng, width, width)

    def cross_attend(self, q: Tensor, pix: Tensor, block: int = 0) -> Tensor:
        """One cross-attention sub-layer (no residual): queries read pixels."""
        return self.cross[block](self.cross_norm[block](q), pix)

    def __call__(self, feats: Tensor, queries: Tensor | None = None) -> tuple[Tensor, Tensor]:
        T, C, H, W = feats.shape
        pix = nc.transpose(nc.reshape(feats, (T, C, H * W)), (0, 2, 1))  # T,HW,C
        q0 = self.queries if queries is None else queries
        q = q0 * nc.Tensor(np.ones((T, 1, 1)))
        n = q.shape[1]
        cls = self.classes * nc.Tensor(np.ones((T, 1, 1)))
        for b in range(len(self.cross)):
            q = q + self.cross_attend(q, pix, b)
            z = nc.concat([q, cls], axis=1)
            q = q + self.self_attn[b](self.self_norm[b](z), self.self_norm[b](z))[:, :n]
        decoded = pix + self.pixel(pix)
        f_dec = nc.reshape(nc.transpose(decoded, (0, 2, 1)), (T, C, H, W))
        return q, f_dec


# --------------------------------------------------------------- video level


def temporal_window_ids(frames: int, window: int, shift: int) -> np.ndarray:
    """Window index per frame. With shift s>0 the first s frames form their
    own (short) window and the rest tile in chunks of ``window``."""
    t = np.arange(frames)
    if shift % window == 0:
        return t // window
    return (t + window - shift % window) // window


def temporal_window_mask(frames: int, window: int, shift: int) -> np.ndarray:
    ids = temporal_window_ids(frames, window, shift)
    return np.where(ids[:, None] == ids[None, :], 0.0, -np.inf)


class TemporalBlock(Module):
    def __init__(self, rng: Rng, width: int, heads: int = 1, ratio: int = 2):
        self.norm1 = LayerNorm(width)
        self.attn = MultiHeadAttention(rng, width, heads)
        self.norm2 = LayerNorm(width)
        self.ffn = FeedForward(rng, width, ratio)

    def __call__(self, x: Tensor, mask: np.ndarray | None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.norm2(x))


class InstanceEncoder(Module):
    """Temporal window self-attention among tokens sharing an instance index."""

    def __init__(self, rng: Rng, width: int, window: int = 2, shift: int = 1):
        self.window = window
        self.shift = shift
        self.blocks = [TemporalBlock(rng, width), TemporalBlock(rng, width)]

    def block_forward(self, tokens: Tensor, block: int, window: int, shift: int) -> Tensor:
        """tokens (T, N_f, C) through one block with the given partition."""
        T = tokens.shape[0]
        x = nc.transpose(tokens, (1, 0, 2))  # N_f,T,C: instances never mix
        x = self.blocks[block](x, temporal_window_mask(T, window, shift))
        return nc.transpose(x, (1, 0, 2))

    def __call__(self, tokens: Tensor) -> Tensor:
        x = self.block_forward(tokens, 0, self.window, 0)
        return self.block_forward(x, 1, self.window, self.shift)


class InstanceDecoder(Module):
    """Video query i aggregates the instance-i tokens of every frame."""

    def __init__(self, rng: Rng, width: int, n_video: int, blocks: int = 2):
        self.video_queries = nc.param(rng.normal((n_video, width), std=1.0))
        self.norm_q = [LayerNorm(width) for _ in range(blocks)]
        self.norm_kv = [LayerNorm(width) for _ in range(blocks)]
        self.cross = [MultiHeadAttention(rng, width) for _ in range(blocks)]
        self.norm_f = [LayerNorm(width) for _ in range(blocks)]
        self.ffn = [FeedForward(rng, width) for _ in range(blocks)]

    def __call__(self, tokens: Tensor) -> Tensor:
        T, N, C = tokens.shape
        kv = nc.transpose(tokens, (1, 0, 2))  # N,T,C
        q = nc.reshape(self.video_queries, (N, 1, C))
        for b in range(len(self.cross)):
            q = q + self.cross[b](self.norm_q[b](q), self.norm_kv[b](kv))
            q = q + self.ffn[b](self.norm_f[b](q))
        return nc.reshape(q, (N, C))

    def attention_rows(self) -> list[np.ndarray]:
        return [blk._last_attn.data for blk in self.cross]


def predict_mask_logits(video_tokens: Tensor, feats: Tensor) -> Tensor:
    """Per-pixel dot product of each video token with decoded features:
    (N_v,C) x (T,C,H,W) -> (T,N_v,H,W)."""
    T, C, H, W = feats.shape
    flat = nc.reshape(feats, (T, C, H * W))
    logits = nc.matmul(video_tokens, flat)
    return nc.reshape(logits, (T, video_tokens.shape[0], H, W))


def exclusive_labels(logits: np.ndarray, background_bias: float) -> np.ndarray:
    """Argmax over {background, instances}; instance slot i maps to id i+1."""
    T, N, H, W = logits.shape
    scores = np.concatenate([np.full((T, 1, H, W), background_bias), logits], axis=1)
    return np.argmax(scores, axis=1)


class SemanticExtractor(Module):
    def __init__(self, rng: Rng, width: int = 32, n_inst: int = 3, n_cls: int = 4,
                 window: int = 2, shift: int = 1):
        self.width = width
        self.n_inst = n_inst
        self.encoder = FrameEncoder(rng, width)
        self.decoder = FrameDecoder(rng, width, n_inst, n_cls)
        self.inst_encoder = InstanceEncoder(rng, width, window, shift)
        self.inst_decoder = InstanceDecoder(rng, width, n_inst)
        self.bg_bias = nc.param(np.zeros(()))

    def frame_encode(self, frames: Tensor) -> Tensor:
        return self.encoder(frames)

    def frame_decode(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        return self.decoder(feats)

    def __call__(self, frames) -> SemanticBundle:
        """Learned path over an LR clip (T,3,H,W)."""
        frames = nc.as_tensor(frames)
        feats = self.frame_encode(frames)
        tokens, f_dec = self.frame_decode(feats)
        glob = tokens[:, -1]
        inst = self.inst_encoder(tokens[:, :-1])
        video = self.inst_decoder(inst)
        logits = predict_mask_logits(video, f_dec)
        labels = exclusive_labels(logits.data, float(self.bg_bias.data))
        bg = _pooled_token(f_dec, labels == 0)
        return SemanticBundle(glob, video, bg, labels, logits)

    def decoded_features(self, frames) -> Tensor:
        feats = self.frame_encode(nc.as_tensor(frames))
        return self.frame_decode(feats)[1]


def _pooled_token(feats: Tensor, region: np.ndarray, normalize: bool = True) -> Tensor:
    """Mean of feats (T,C,H,W) over region (T,H,W) pixels, L2-normalised.
    Empty regions give the zero vector."""
    T, C, H, W = feats.shape
    count = region.sum()
    if count == 0:
        return nc.Tensor(np.zeros(C))
    weights = nc.Tensor((region / count).reshape(T, H * W, 1))
    pooled = nc.tsum(nc.matmul(nc.reshape(feats, (T, C, H * W)), weights), axis=(0, 2))
    if not normalize:
        return pooled
    if not np.any(pooled.data):
        return pooled
    return pooled / nc.sqrt(nc.tsum(nc.square(pooled)))


def oracle_bundle(labels: np.ndarray, decoded: Tensor, n_tokens: int) -> SemanticBundle:
    """Ground-truth semantics: masks copied from ``labels`` and tokens pooled
    from decoded features (T,C_s,H,W) over each instance's pixels."""
    labels = np.asarray(labels)
    T, C, H, W = decoded.shape
    if labels.shape != (T, H, W):
        raise nc.DimensionError(f"labels {labels.shape} vs features {(T, H, W)}")
    inst = nc.stack([_pooled_token(decoded, labels == i) for i in range(1, n_tokens + 1)])
    glob = nc.mean(nc.reshape(decoded, (T, C, H * W)), axis=2)
    bg = _pooled_token(decoded, labels == 0)
    return SemanticBundle(glob, inst, bg, labels.copy())


def compress_semantics(bundle: SemanticBundle, proj: Tensor) -> SemanticBundle:
    """Project token widths through one shared (C_s, C) map; masks unchanged."""
    return replace(
        bundle,
        global_tokens=nc.matmul(bundle.global_tokens, proj),
        instance_tokens=nc.matmul(bundle.instance_tokens, proj),
        background_token=nc.matmul(nc.reshape(bundle.background_token, (1, -1)), proj)[0],
    )


def mask_bce(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel binary cross-entropy; slot i is supervised by id i+1."""
    T, N, H, W = logits.shape
    target = np.stack([labels == i for i in range(1, N + 1)], axis=1).astype(float)
    # softplus(x) - x*y is the stable form of BCE-with-logits
    loss = nc.softplus(logits) - logits * nc.Tensor(target)
    return nc.mean(loss)


def mask_iou(pred: np.ndarray, labels: np.ndarray, instance_ids) -> dict[int, float]:
    """IoU between predicted exclusive labels and ground truth per instance id."""
    out = {}
    for i in instance_ids:
        p, g = pred == i, labels == i
        union = (p | g).sum()
        out[int(i)] = float((p & g).sum() / union) if union else 1.0
    return out
