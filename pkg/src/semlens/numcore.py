"""Small float64 tensor library with tape-based reverse-mode autodiff.

Every differentiable op records a node (parents + backward closure) on its
output. ``backward`` collects the nodes reachable from a scalar loss into a
:class:`Tape` ordered by creation sequence and replays it in reverse, so each
node is visited exactly once.
"""
from __future__ import annotations

import contextlib
import itertools
import json
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class DegenerateRowError(ValueError):
    """Raised when a softmax slice is entirely masked out."""


_seq = itertools.count()
_grad_enabled = True
# test hook for the selftest negative control
_softmax_fault = False


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_softmax_fault(enabled: bool) -> None:
    global _softmax_fault
    _softmax_fault = bool(enabled)


class Node:
    __slots__ = ("parents", "backward_fn", "seq")

    def __init__(self, parents, backward_fn, seq):
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = seq


class Tensor:
    """Dense float64 array, optionally participating in gradient recording."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_scalar():
    raise DimensionError("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{opname} produced non-finite values")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, opname: str) -> Tensor:
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._node = Node(tuple(parents), backward_fn, next(_seq))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tape:
    """Nodes reachable from an output, in creation (topological) order."""

    def __init__(self, entries: list[tuple[Tensor, Node]]):
        self.entries = entries

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        entries: list[tuple[Tensor, Node]] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            entries.append((t, t._node))
            stack.extend(t._node.parents)
        entries.sort(key=lambda e: e[1].seq)
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, out: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): seed}
        for t, node in reversed(self.entries):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            pgrads = node.backward_fn(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    p.grad = np.array(pg, dtype=DTYPE) if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = grads[key] + pg if key in grads else pg


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every grad-requiring leaf tensor feeding ``loss``.

    Gradients accumulate across calls; reset with :func:`zero_grad`.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no grad-requiring inputs)")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape.from_output(loss).backward(loss, seed)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences behave)."""
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make(out, (a,), bw, "gelu")


# --------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=DTYPE), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# ------------------------------------------------------------ shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), bw, "index")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), bw, "concat")


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, tuple(ts), bw, "stack")


def roll(a: Tensor, shift, axis) -> Tensor:
    out = np.roll(a.data, shift, axis)
    neg_shift = tuple(-s for s in shift) if isinstance(shift, tuple) else -shift
    return _make(out, (a,), lambda g: (np.roll(g, neg_shift, axis),), "roll")


def pad_hw(a: Tensor, pad_h: int, pad_w: int, mode: str = "reflect") -> Tensor:
    """Pad the trailing two axes on the bottom/right only."""
    if pad_h == 0 and pad_w == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(0, pad_h), (0, pad_w)]
    out = np.pad(a.data, widths, mode=mode)
    H, W = a.shape[-2:]

    if mode == "constant":
        def bw(g):
            return (g[..., :H, :W].copy(),)
    else:
        def bw(g):
            # fold reflected rows/cols back onto their sources
            g = g.copy()
            for k in range(pad_w):
                g[..., :, W - 2 - k] += g[..., :, W + k]
            g = g[..., :, :W]
            for k in range(pad_h):
                g[..., H - 2 - k, :] += g[..., H + k, :]
            return (g[..., :H, :].copy(),)

    return _make(out, (a,), bw, "pad")


# ------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive 0/-inf mask.

    Entries whose mask is -inf get weight exactly 0.
    """
    z = x.data if mask is None else x.data + mask
    m = np.max(z, axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise DegenerateRowError("softmax slice fully masked")
    e = np.exp(z - m)
    out = e / e.sum(axis=-1, keepdims=True)
    if _softmax_fault:
        out = out * 1.01

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"layer_norm affine shape mismatch for width {C}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = g * gain.data
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gain, bias), bw, "layer_norm")


# -------------------------------------------------------------- convolution


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, H, W, C*9) patches with zero padding 1."""
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N, H, W, C * 9)


def _col2im3(cols: np.ndarray, C: int, H: int, W: int) -> np.ndarray:
    N = cols.shape[0]
    c = cols.reshape(N, H, W, C, 3, 3)
    out = np.zeros((N, C, H + 2, W + 2), dtype=DTYPE)
    for i in range(3):
        for j in range(3):
            out[:, :, i:i + H, j:j + W] += c[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out[:, :, 1:H + 1, 1:W + 1]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3, stride 1, zero-pad 1 cross-correlation on (C,H,W) or (N,C,H,W)."""
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects a 3x3 kernel, got {w.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    N, C, H, W = xd.shape
    Cout = w.shape[0]
    if w.shape[1] != C:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {w.shape[1]}")
    cols = _im2col3(xd)
    wm = w.data.reshape(Cout, C * 9)
    y = cols @ wm.T
    if b is not None:
        y = y + b.data
    out = y.transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]
    out = np.ascontiguousarray(out)

    def bw(g):
        gd = g if batched else g[None]
        gm = gd.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = (gm.T @ cols.reshape(-1, C * 9)).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gx = _col2im3((gm @ wm).reshape(N, H, W, C * 9), C, H, W)
            if not batched:
                gx = gx[0]
        grads = [gx, gw]
        if b is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d")


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise conv as a matmul over flattened pixels; w is (C_out, C_in)."""
    *lead, C, H, W = x.shape
    if w.shape[1] != C:
        raise DimensionError(f"conv1x1 channel mismatch: input {C}, weight {w.shape[1]}")
    flat = reshape(x, (*lead, C, H * W))
    y = matmul(w, flat)
    if b is not None:
        y = y + reshape(b, (w.shape[0], 1))
    return reshape(y, (*lead, w.shape[0], H, W))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    Cr, H, W = x.shape
    if Cr % (r * r):
        raise DimensionError(f"pixel_shuffle: {Cr} channels not divisible by {r * r}")
    C = Cr // (r * r)
    return reshape(transpose(reshape(x, (C, r, r, H, W)), (0, 3, 1, 4, 2)), (C, H * r, W * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    C, Hr, Wr = x.shape
    if Hr % r or Wr % r:
        raise DimensionError(f"pixel_unshuffle: extents {Hr}x{Wr} not divisible by {r}")
    H, W = Hr // r, Wr // r
    return reshape(transpose(reshape(x, (C, H, r, W, r)), (0, 2, 4, 1, 3)), (C * r * r, H, W))


def window_offsets(radius: int) -> np.ndarray:
    """Row-major (dy, dx) offsets of a (2r+1)^2 window."""
    rng = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(rng, rng, indexing="ij")
    return np.stack([dy.ravel(), dx.ravel()], axis=1)


def local_windows(x: Tensor, radius: int) -> Tensor:
    """Gather each pixel's (2r+1)^2 neighbourhood: (C,H,W) -> (H,W,K,C).

    Out-of-canvas taps are zero; callers mask them.
    """
    C, H, W = x.shape
    r = radius
    k = 2 * r + 1
    xp = np.pad(x.data, ((0, 0), (r, r), (r, r)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))  # C,H,W,k,k
    out = np.ascontiguousarray(win.transpose(1, 2, 3, 4, 0)).reshape(H, W, k * k, C)

    def bw(g):
        g5 = g.reshape(H, W, k, k, C)
        gp = np.zeros((C, H + 2 * r, W + 2 * r), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                gp[:, i:i + H, j:j + W] += g5[:, :, i, j, :].transpose(2, 0, 1)
        return (gp[:, r:r + H, r:r + W],)

    return _make(out, (x,), bw, "local_windows")


# ---------------------------------------------------------------- checking


def finite_diff_check(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                      coords: Sequence[int] | None = None) -> float:
    """Worst relative error between analytic and central-difference grads.

    ``f`` is re-evaluated after perturbing ``x.data`` in place, so it must
    close over ``x`` and be deterministic. ``coords`` restricts the check to a
    subset of flat indices.
    """
    x.grad = None
    out = f()
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data.sum())
            flat[i] = orig - h
            fm = float(f().data.sum())
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = analytic.reshape(-1)[i]
            denom = max(abs(ana), abs(num), 1e-8)
            worst = max(worst, abs(ana - num) / denom)
    x.grad = None
    return worst


# --------------------------------------------------------------------- rng


class Rng:
    """Seeded Philox4x64 counter-based generator (numpy implementation)."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    @property
    def gen(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, low=0.0, high=1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self._gen.integers(low, high, shape)

    def choice(self, n, size=None, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from (seed, key)."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + key + 1) & 0xFFFFFFFFFFFFFFFF)

    def get_state(self) -> bytes:
        return json.dumps({"seed": self.seed, "state": self._gen.bit_generator.state},
                          sort_keys=True, default=_json_int).encode()

    def set_state(self, blob: bytes) -> None:
        st = json.loads(blob.decode())
        self.seed = st["seed"]
        self._gen.bit_generator.state = _restore_arrays(st["state"])


def _json_int(o):
    if isinstance(o, np.ndarray):
        return {"__nd__": [int(v) for v in o.ravel()], "dtype": str(o.dtype)}
    if isinstance(o, np.integer):
        return int(o)
    raise TypeError(type(o))


def _restore_arrays(d):
    if isinstance(d, dict):
        if "__nd__" in d:
            return np.array(d["__nd__"], dtype=d["dtype"])
        return {k: _restore_arrays(v) for k, v in d.items()}
    return d


# ------------------------------------------------------------------ module


class Module:
    """Attribute-walking parameter container."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in params.items():
            if state[n].shape != p.shape:
                raise DimensionError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=DTYPE)


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def conv_param(rng: Rng, cout: int, cin: int, zero: bool = False) -> tuple[Tensor, Tensor]:
    """He-style init for a 3x3 kernel plus zero bias."""
    if zero:
        w = np.zeros((cout, cin, 3, 3))
    else:
        w = rng.normal((cout, cin, 3, 3), std=np.sqrt(2.0 / (cin * 9)))
    return param(w), param(np.zeros(cout))


def linear_param(rng: Rng, cin: int, cout: int, zero: bool = False, gain: float = 1.0) -> Tensor:
    """(cin, cout) matrix used as x @ W."""
    if zero:
        return param(np.zeros((cin, cout)))
    return param(rng.normal((cin, cout), std=gain / np.sqrt(cin)))
