"""Reusable parametrised layers built on numcore primitives."""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Module, Rng, Tensor


class Linear(Module):
    def __init__(self, rng: Rng, cin: int, cout: int, bias: bool = True, zero: bool = False):
        self.weight = nc.linear_param(rng, cin, cout, zero=zero)
        self.bias = nc.param(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nc.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = nc.param(np.ones(width))
        self.bias = nc.param(np.zeros(width))

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.gain, self.bias)


class Conv3x3(Module):
    def __init__(self, rng: Rng, cin: int, cout: int, zero: bool = False):
        self.weight, self.bias = nc.conv_param(rng, cout, cin, zero=zero)

    def __call__(self, x: Tensor) -> Tensor:
        return nc.conv2d(x, self.weight, self.bias)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, h*d) -> (..., h, n, d)."""
    *lead, n, c = x.shape
    x = nc.reshape(x, (*lead, n, heads, c // heads))
    k = len(lead)
    return nc.transpose(x, (*range(k), k + 1, k, k + 2))


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, n, d) -> (..., n, h*d)."""
    *lead, h, n, d = x.shape
    k = len(lead)
    x = nc.transpose(x, (*range(k), k + 1, k, k + 2))
    return nc.reshape(x, (*lead, n, h * d))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              scale: bool = True) -> tuple[Tensor, Tensor]:
    """softmax(q k^T [/ sqrt d] + mask) v over the last two axes."""
    logits = nc.matmul(q, nc.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)))
    if scale:
        logits = logits * (1.0 / np.sqrt(q.shape[-1]))
    attn = nc.softmax_lastdim(logits, mask)
    return nc.matmul(attn, v), attn


class MultiHeadAttention(Module):
    """Projected multi-head attention; ``out_zero`` makes the block start as a no-op."""

    def __init__(self, rng: Rng, width: int, heads: int = 1, out_zero: bool = False):
        self.heads = heads
        self.wq = Linear(rng, width, width, bias=False)
        self.wk = Linear(rng, width, width, bias=False)
        self.wv = Linear(rng, width, width, bias=False)
        self.wo = Linear(rng, width, width, zero=out_zero)
        self._last_attn: Tensor | None = None

    def __call__(self, xq: Tensor, xkv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q = split_heads(self.wq(xq), self.heads)
        k = split_heads(self.wk(xkv), self.heads)
        v = split_heads(self.wv(xkv), self.heads)
        out, attn = attention(q, k, v, mask)
        self._last_attn = attn
        return self.wo(merge_heads(out))


class FeedForward(Module):
    def __init__(self, rng: Rng, width: int, ratio: int = 2, out_zero: bool = False):
        self.fc1 = Linear(rng, width, width * ratio)
        self.fc2 = Linear(rng, width * ratio, width, zero=out_zero)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.gelu(self.fc1(x)))
