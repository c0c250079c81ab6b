import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semlens import numcore as nc
from semlens.image_align import (ImageAlign, WindowSpec, build_attention_mask, masked_local_attention,
                                 prealign_clip, unmasked_window_mask)
from semlens.numcore import DimensionError, Rng, Tensor

C = 3


def eye():
    return Tensor(np.eye(C))


def brute_force_mask(ref, sup, r):
    H, W = ref.shape
    out = np.full((H, W, (2 * r + 1) ** 2), -np.inf)
    for y in range(H):
        for x in range(W):
            k = 0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if (dy == 0 and dx == 0) or (0 <= yy < H and 0 <= xx < W and sup[yy, xx] == ref[y, x]):
                        out[y, x, k] = 0.0
                    k += 1
    return out


def sprite_labels(H, W, top, left, size=3, ident=1):
    lab = np.zeros((H, W), int)
    lab[top:top + size, left:left + size] = ident
    return lab


# ------------------------------------------------------------------ masks


def test_identical_maps_radius_zero_all_allowed():
    lab = Rng(0).integers(0, 3, (5, 5))
    assert np.all(build_attention_mask(lab, lab, WindowSpec(0)) == 0)


def test_foreign_window_leaves_only_center():
    ref = np.ones((7, 7), int)
    sup = np.full((7, 7), 2)
    m = build_attention_mask(ref, sup, WindowSpec(1))
    assert np.all(m[..., 4] == 0)
    assert np.all(np.isneginf(np.delete(m, 4, axis=-1)))


def test_translated_sprite_matches_brute_force():
    ref = sprite_labels(10, 12, 3, 3)
    sup = sprite_labels(10, 12, 3, 5)
    assert np.array_equal(build_attention_mask(ref, sup, WindowSpec(3)), brute_force_mask(ref, sup, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2))
def test_mask_matches_brute_force_random_labels(seed, r):
    rng = Rng(seed)
    ref, sup = rng.integers(0, 3, (5, 6)), rng.integers(0, 3, (5, 6))
    assert np.array_equal(build_attention_mask(ref, sup, WindowSpec(r)), brute_force_mask(ref, sup, r))


def test_mask_shape_mismatch():
    with pytest.raises(DimensionError):
        build_attention_mask(np.zeros((3, 3), int), np.zeros((3, 4), int), WindowSpec(1))


# -------------------------------------------------------------- attention


def test_radius_zero_returns_reference():
    f = Tensor(Rng(1).normal((C, 4, 5)))
    spec = WindowSpec(0)
    out = masked_local_attention(f, f, unmasked_window_mask(4, 5, spec), spec, eye(), eye(), eye())
    assert np.array_equal(out.data, f.data)


def test_distinct_labels_pass_colocated_support():
    ref, sup = Tensor(Rng(2).normal((C, 5, 5))), Tensor(Rng(3).normal((C, 5, 5)))
    spec = WindowSpec(2)
    m = build_attention_mask(np.ones((5, 5), int), np.full((5, 5), 2), spec)
    out = masked_local_attention(ref, sup, m, spec, eye(), eye(), eye())
    assert np.array_equal(out.data, sup.data)


def test_masked_weights_exactly_zero_and_rows_normalised():
    rng = Rng(4)
    ref, sup = Tensor(rng.normal((C, 6, 6))), Tensor(rng.normal((C, 6, 6)))
    spec = WindowSpec(2)
    m = build_attention_mask(rng.integers(0, 3, (6, 6)), rng.integers(0, 3, (6, 6)), spec)
    w = [Tensor(rng.normal((C, C))) for _ in range(3)]
    _, attn = masked_local_attention(ref, sup, m, spec, *w, return_attention=True)
    a = attn.data[:, :, 0, :]
    assert np.all(a[np.isneginf(m)] == 0.0)
    assert np.abs(a.sum(-1) - 1).max() <= 1e-9


def test_uniform_labels_equal_unmasked_attention():
    rng = Rng(5)
    ref, sup = Tensor(rng.normal((C, 6, 7))), Tensor(rng.normal((C, 6, 7)))
    spec = WindowSpec(1)
    w = [Tensor(rng.normal((C, C))) for _ in range(3)]
    lab = np.full((6, 7), 4)
    a = masked_local_attention(ref, sup, build_attention_mask(lab, lab, spec), spec, *w).data
    b = masked_local_attention(ref, sup, unmasked_window_mask(6, 7, spec), spec, *w).data
    # independent oracle: explicit per-pixel softmax over in-canvas taps
    H, W = 6, 7
    q = np.einsum("chw,cd->hwd", ref.data, w[0].data)
    k = np.einsum("chw,cd->hwd", sup.data, w[1].data)
    v = np.einsum("chw,cd->hwd", sup.data, w[2].data)
    oracle = np.zeros((C, H, W))
    for y in range(H):
        for x in range(W):
            taps = [(y + dy, x + dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
                    if 0 <= y + dy < H and 0 <= x + dx < W]
            z = np.array([q[y, x] @ k[p] for p in taps])
            e = np.exp(z - z.max())
            oracle[:, y, x] = (e / e.sum()) @ np.array([v[p] for p in taps])
    assert np.abs(a - b).max() <= 1e-12
    assert np.abs(a - oracle).max() <= 1e-12


def textured_pair(shift=2):
    """Reference and supporting features with a textured 3x3 sprite moved right by ``shift``."""
    H, W = 10, 12
    rng = Rng(6)
    tex = rng.uniform(0.5, 1.5, (C, 3, 3))
    ref, sup = np.zeros((C, H, W)), np.zeros((C, H, W))
    ref[:, 3:6, 3:6] = tex
    sup[:, 3:6, 3 + shift:6 + shift] = tex
    return ref, sup, sprite_labels(H, W, 3, 3), sprite_labels(H, W, 3, 3 + shift)


def test_alignment_reduces_sprite_distance():
    ref, sup, lref, lsup = textured_pair()
    spec = WindowSpec(3)
    scale = Tensor(8.0 * np.eye(C))  # sharpen the softmax
    out = masked_local_attention(Tensor(ref), Tensor(sup), build_attention_mask(lref, lsup, spec),
                                 spec, scale, eye(), eye()).data
    inside = lref == 1
    before = ((sup - ref) ** 2)[:, inside].mean()
    after = ((out - ref) ** 2)[:, inside].mean()
    assert after < before


def test_translation_consistency():
    rng = Rng(7)
    H, W, r = 12, 12, 1
    spec = WindowSpec(r)
    ref, sup = rng.normal((C, H, W)), rng.normal((C, H, W))
    lref, lsup = rng.integers(0, 2, (H, W)), rng.integers(0, 2, (H, W))
    w = [Tensor(rng.normal((C, C))) for _ in range(3)]

    def run(a, b, la, lb):
        return masked_local_attention(Tensor(a), Tensor(b), build_attention_mask(la, lb, spec), spec, *w).data

    base = run(ref, sup, lref, lsup)
    roll = lambda x: np.roll(x, (2, 3), axis=(-2, -1))  # noqa: E731
    moved = run(roll(ref), roll(sup), roll(lref), roll(lsup))
    # compare away from the borders and from the wrap seam
    assert np.abs(moved[:, 2 + r + 2:H - r, 3 + r + 3:W - r] - base[:, r + 2:H - r - 2, r + 3:W - r - 3]).max() <= 1e-12


# ------------------------------------------------------------- clip level


def test_prealign_single_frame_and_reference_unchanged():
    align = ImageAlign(Rng(8), C, WindowSpec(1))
    rng = Rng(9)
    frames = [Tensor(rng.normal((C, 5, 5))) for _ in range(3)]
    labels = rng.integers(0, 2, (3, 5, 5))
    assert prealign_clip(frames[:1], labels[:1], 0, align)[0] is frames[0]
    out = prealign_clip(frames, labels, 1, align)
    assert out[1] is frames[1]
    assert all(o.shape == f.shape for o, f in zip(out, frames))


def test_prealign_gradcheck():
    align = ImageAlign(Rng(10), C, WindowSpec(1))
    rng = Rng(11)
    frames = [Tensor(rng.normal((C, 4, 4)), requires_grad=True) for _ in range(2)]
    labels = rng.integers(0, 2, (2, 4, 4))
    w = Tensor(rng.normal((C, 4, 4)))

    def loss():
        return nc.tsum(prealign_clip(frames, labels, 0, align)[1] * w)

    for x in (frames[0], frames[1], align.wq, align.wk):
        assert nc.finite_diff_check(loss, x) <= 1e-4


def test_offset_bias_prior_and_literal_mode():
    literal = ImageAlign(Rng(12), C, WindowSpec(1), locality=0.0)
    assert literal.offset_bias is None
    assert [n for n, _ in literal.named_parameters()] == ["wq", "wk", "wv"]
    biased = ImageAlign(Rng(12), C, WindowSpec(1), locality=2.0)
    assert biased.offset_bias.data.tolist() == [-4.0, -2.0, -4.0, -2.0, 0.0, -2.0, -4.0, -2.0, -4.0]


def test_offset_bias_adds_to_logits():
    rng = Rng(13)
    ref, sup = Tensor(rng.normal((C, 4, 4))), Tensor(rng.normal((C, 4, 4)))
    spec = WindowSpec(1)
    m = unmasked_window_mask(4, 4, spec)
    bias = rng.normal((9,))
    w = [Tensor(rng.normal((C, C))) for _ in range(3)]
    a = masked_local_attention(ref, sup, m, spec, *w, offset_bias=Tensor(bias)).data
    b = masked_local_attention(ref, sup, m + bias, spec, *w).data
    assert np.abs(a - b).max() <= 1e-12


def test_offset_bias_gradcheck():
    align = ImageAlign(Rng(14), C, WindowSpec(1))
    rng = Rng(15)
    ref, sup = Tensor(rng.normal((C, 4, 4))), Tensor(rng.normal((C, 4, 4)))
    labels = rng.integers(0, 2, (2, 4, 4))
    w = Tensor(rng.normal((C, 4, 4)))
    loss = lambda: nc.tsum(align(ref, sup, labels[0], labels[1]) * w)  # noqa: E731
    assert nc.finite_diff_check(loss, align.offset_bias) <= 1e-4
