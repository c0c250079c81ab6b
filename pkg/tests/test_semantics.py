import numpy as np
import pytest

from semlens import numcore as nc
from semlens.numcore import Rng, Tensor
from semlens.semantics import (InstanceDecoder, InstanceEncoder, SemanticExtractor, compress_semantics,
                               exclusive_labels, mask_bce, mask_iou, oracle_bundle, predict_mask_logits,
                               temporal_window_ids, temporal_window_mask)
from semlens.synthvid import DatasetSpec, SceneSpec, Sprite, generate_clip, make_clip

C_S = 8


@pytest.fixture(scope="module")
def extractor():
    return SemanticExtractor(Rng(0), width=C_S, n_inst=3, n_cls=4)


@pytest.fixture(scope="module")
def clip():
    return make_clip(DatasetSpec(lr_size=8, frames=5), 3)


# ------------------------------------------------------------- frame level


def test_frame_encode_shape_and_determinism(extractor, clip):
    f = extractor.frame_encode(Tensor(clip.lr))
    assert f.shape == (5, C_S, 8, 8)
    frames = np.stack([clip.lr[0], clip.lr[0]])
    g = extractor.frame_encode(Tensor(frames)).data
    assert np.array_equal(g[0], g[1])


def test_frame_encode_gradcheck(extractor):
    x = Tensor(Rng(1).uniform(0, 1, (1, 3, 4, 4)), requires_grad=True)
    w = Tensor(Rng(2).normal((1, C_S, 4, 4)))
    assert nc.finite_diff_check(lambda: nc.tsum(extractor.frame_encode(x) * w), x) <= 1e-4


def test_frame_decode_rows_and_feature_shape(extractor, clip):
    feats = extractor.frame_encode(Tensor(clip.lr))
    tokens, f_dec = extractor.frame_decode(feats)
    assert tokens.shape == (5, 3 + 1, C_S)
    assert f_dec.shape == feats.shape


def test_zero_queries_attend_uniformly(extractor):
    dec = extractor.decoder
    pix = Tensor(Rng(3).normal((1, 6, C_S)))
    out = dec.cross_attend(Tensor(np.zeros((1, 4, C_S))), pix, 0).data
    attn = dec.cross[0]
    pooled = pix.data.mean(axis=1)  # uniform weights
    expect = (pooled @ attn.wv.weight.data) @ attn.wo.weight.data + attn.wo.bias.data
    assert np.abs(out - expect[:, None, :]).max() <= 1e-12


def test_query_permutation_permutes_instance_rows(extractor):
    feats = Tensor(Rng(4).normal((2, C_S, 4, 4)))
    q = Rng(5).normal((4, C_S))
    perm = np.array([2, 0, 1, 3])  # global row stays last
    a, _ = extractor.decoder(feats, Tensor(q))
    b, _ = extractor.decoder(feats, Tensor(q[perm]))
    assert np.abs(a.data[:, perm] - b.data).max() <= 1e-12


# ----------------------------------------------------------- temporal windows


def test_window_partition_t5_w2():
    assert temporal_window_ids(5, 2, 0).tolist() == [0, 0, 1, 1, 2]
    # shifted by one: {1}, {2,3}, {4,5} in 1-based frame numbers
    assert temporal_window_ids(5, 2, 1).tolist() == [0, 1, 1, 2, 2]


def test_window_mask_w1_is_diagonal():
    m = temporal_window_mask(4, 1, 0)
    assert np.array_equal(m == 0, np.eye(4, dtype=bool))


def test_single_window_equals_full_attention():
    enc = InstanceEncoder(Rng(6), C_S, window=5, shift=0)
    tokens = Tensor(Rng(7).normal((5, 3, C_S)))
    windowed = enc.block_forward(tokens, 0, 5, 0).data
    full = nc.transpose(enc.blocks[0](nc.transpose(tokens, (1, 0, 2)), None), (1, 0, 2)).data
    assert np.abs(windowed - full).max() <= 1e-12


def test_singleton_window_attends_to_itself():
    enc = InstanceEncoder(Rng(8), C_S, window=1, shift=0)
    enc.block_forward(Tensor(Rng(9).normal((4, 2, C_S))), 0, 1, 0)
    attn = enc.blocks[0].attn._last_attn.data  # N_f, heads, T, T
    assert np.array_equal(attn[:, 0], np.broadcast_to(np.eye(4), attn[:, 0].shape))


def test_instance_encoder_never_mixes_indices():
    enc = InstanceEncoder(Rng(10), C_S)
    base = Rng(11).normal((5, 3, C_S))
    tagged = base.copy()
    tagged[:, 1] += 3.0  # perturb instance index 1 only
    a, b = enc(Tensor(base)).data, enc(Tensor(tagged)).data
    assert np.array_equal(a[:, 0], b[:, 0]) and np.array_equal(a[:, 2], b[:, 2])
    assert not np.allclose(a[:, 1], b[:, 1])


# ------------------------------------------------------------ instance decode


def test_instance_decoder_single_frame_dependence():
    dec = InstanceDecoder(Rng(12), C_S, 3)
    tokens = Rng(13).normal((1, 3, C_S))
    a = dec(Tensor(tokens)).data
    b = dec(Tensor(tokens.copy())).data
    assert a.shape == (3, C_S) and np.array_equal(a, b)


def test_instance_decoder_attention_rows_convex():
    dec = InstanceDecoder(Rng(14), C_S, 3)
    tokens = Rng(15).normal((4, 3, C_S))
    dec(Tensor(np.concatenate([tokens, tokens[-1:]])))  # duplicated last frame
    for rows in dec.attention_rows():
        assert rows.min() >= 0
        assert np.abs(rows.sum(-1) - 1).max() <= 1e-9
        assert rows.shape[-1] == 5


def test_video_queries_receive_mask_gradient(extractor, clip):
    extractor.inst_decoder.video_queries.grad = None
    bundle = extractor(clip.lr)
    nc.backward(mask_bce(bundle.mask_logits, clip.labels))
    g = extractor.inst_decoder.video_queries.grad
    assert g is not None and np.abs(g).max() > 0
    nc.zero_grad(extractor.parameters())


# -------------------------------------------------------------- mask logits


def test_orthogonal_token_gives_empty_mask():
    feats = np.zeros((1, 2, 3, 3))
    feats[0, 1] = Rng(16).normal((3, 3))
    logits = predict_mask_logits(Tensor([[1.0, 0.0]]), Tensor(feats)).data
    assert np.all(logits == 0.0)
    assert not (logits > 0).any()  # sigmoid(0) = 0.5 fails the strict threshold


def test_token_matching_one_pixel():
    v = np.array([1.5, -2.0, 0.5])
    feats = np.zeros((1, 3, 2, 2))
    feats[0, :, 1, 0] = v
    logits = predict_mask_logits(Tensor(v[None]), Tensor(feats)).data[0, 0]
    assert logits[1, 0] == pytest.approx(v @ v, abs=0)
    assert np.count_nonzero(logits) == 1


def test_mask_logits_bilinear_in_token_scale():
    rng = Rng(17)
    tok, feats = rng.normal((2, 4)), Tensor(rng.normal((3, 4, 2, 5)))
    a = predict_mask_logits(Tensor(tok), feats).data
    b = predict_mask_logits(Tensor(4.0 * tok), feats).data
    assert np.array_equal(b, 4.0 * a)


def test_exclusive_labels_cover_every_pixel():
    logits = Rng(18).normal((2, 3, 4, 4))
    lab = exclusive_labels(logits, 0.2)
    assert lab.shape == (2, 4, 4)
    assert set(np.unique(lab)) <= {0, 1, 2, 3}
    best = logits.max(axis=1)
    assert np.all((lab == 0) == (best <= 0.2))


# ------------------------------------------------------------------- oracle


def test_oracle_labels_pass_through_bit_exact(clip):
    feats = Tensor(Rng(19).normal((5, C_S, 8, 8)))
    bundle = oracle_bundle(clip.labels, feats, 3)
    assert np.array_equal(bundle.labels, clip.labels)
    assert bundle.labels is not clip.labels


def test_single_instance_covering_frame_matches_global_direction():
    feats = Tensor(Rng(20).normal((3, C_S, 4, 4)))
    labels = np.ones((3, 4, 4), int)
    b = oracle_bundle(labels, feats, 2)
    g = b.global_tokens.data.mean(axis=0)
    assert np.abs(b.instance_tokens.data[0] - g / np.linalg.norm(g)).max() <= 1e-12
    assert np.all(b.instance_tokens.data[1] == 0)  # absent instance


def test_static_sprite_token_frame_count_invariant():
    frame = Rng(21).normal((C_S, 4, 4))
    labels = np.zeros((4, 4), int)
    labels[1:3, 1:3] = 1
    toks = []
    for T in (1, 3, 5):
        feats = Tensor(np.repeat(frame[None], T, axis=0))
        toks.append(oracle_bundle(np.repeat(labels[None], T, axis=0), feats, 1).instance_tokens.data)
    assert np.abs(toks[0] - toks[1]).max() <= 1e-12 and np.abs(toks[0] - toks[2]).max() <= 1e-12


def test_oracle_tokens_unit_norm():
    clip = generate_clip(SceneSpec(height=32, width=32, sprites=[Sprite(size=12), Sprite("rect", size=10)]), 1)
    b = oracle_bundle(clip.labels, Tensor(Rng(22).normal((5, C_S, 8, 8))), 2)
    norms = np.linalg.norm(b.instance_tokens.data, axis=1)
    present = [(clip.labels == i).any() for i in (1, 2)]
    assert np.allclose(norms[present], 1.0, atol=1e-12)


# ---------------------------------------------------------------- compress


def test_identity_projection_keeps_tokens(clip):
    feats = Tensor(Rng(23).normal((5, C_S, 8, 8)))
    b = oracle_bundle(clip.labels, feats, 3)
    c = compress_semantics(b, Tensor(np.eye(C_S)))
    assert np.array_equal(c.instance_tokens.data, b.instance_tokens.data)
    assert np.array_equal(c.global_tokens.data, b.global_tokens.data)
    assert c.labels is b.labels


def test_compress_width_and_gradcheck(clip):
    feats = Tensor(Rng(24).normal((5, C_S, 8, 8)))
    b = oracle_bundle(clip.labels, feats, 3)
    proj = Tensor(Rng(25).normal((C_S, 4)), requires_grad=True)
    c = compress_semantics(b, proj)
    assert c.instance_tokens.shape == (3, 4) and c.global_tokens.shape == (5, 4)
    w = Rng(26).normal((3, 4))

    def f():
        cc = compress_semantics(b, proj)
        return nc.tsum(cc.instance_tokens * Tensor(w)) + nc.tsum(cc.global_tokens) + nc.tsum(cc.background_token)

    assert nc.finite_diff_check(f, proj) <= 1e-4


# ---------------------------------------------------------------- losses


def test_mask_iou_and_bce():
    lab = np.array([[[0, 1], [2, 2]]])
    assert mask_iou(lab, lab, [1, 2]) == {1: 1.0, 2: 1.0}
    pred = np.array([[[1, 1], [2, 0]]])
    assert mask_iou(pred, lab, [1, 2]) == {1: 0.5, 2: 0.5}
    logits = Tensor(np.zeros((1, 2, 2, 2)))
    assert mask_bce(logits, lab).item() == pytest.approx(np.log(2), abs=1e-15)
