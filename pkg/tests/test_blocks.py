import numpy as np
import pytest

from fcbfuse import blocks as B
from fcbfuse import functional as F
from fcbfuse.params import ParamBuilder, param_count
from fcbfuse.tensor import ShapeError, Tensor


def build(init, *args, seed=0, dtype=np.float64):
    b = ParamBuilder(np.random.default_rng(seed), dtype)
    init(b, *args)
    return b.build()


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def test_gn_groups_rule():
    assert B.gn_groups(64) == 32
    assert B.gn_groups(96) == 32
    assert B.gn_groups(16) == 16
    assert B.gn_groups(20) == 20
    assert B.gn_groups(40) == 20
    assert B.gn_groups(3) == 3


# residual block


def test_rb_zero_main_path_is_identity(rng):
    p = build(B.init_residual_block, 8, 8)
    for k in ("conv1.weight", "conv2.weight", "conv2.bias"):
        p[k].data[...] = 0
    x = rng.normal(size=(2, 8, 5, 5))
    out = B.residual_block(t64(x), p.scope(""))
    np.testing.assert_array_equal(out.data, x)


def test_rb_zero_main_path_is_skip_conv(rng):
    p = build(B.init_residual_block, 8, 16)
    for k in ("conv1.weight", "conv2.weight", "conv2.bias"):
        p[k].data[...] = 0
    x = t64(rng.normal(size=(1, 8, 4, 4)))
    out = B.residual_block(x, p.scope(""))
    skip = F.conv2d(x, p["skip.weight"], p["skip.bias"])
    np.testing.assert_array_equal(out.data, skip.data)


def test_rb_shape_and_param_layout():
    p = build(B.init_residual_block, 32, 64)
    out = B.residual_block(t64(np.zeros((2, 32, 8, 8))), p.scope(""))
    assert out.shape == (2, 64, 8, 8)
    assert p["conv1.weight"].shape == (64, 32, 3, 3)
    assert p["conv2.weight"].shape == (64, 64, 3, 3)
    assert "skip.weight" in p and "skip.weight" not in build(B.init_residual_block, 8, 8)


def test_rb_rejects_wrong_channels():
    p = build(B.init_residual_block, 8, 8)
    with pytest.raises(ShapeError):
        B.residual_block(t64(np.zeros((1, 4, 4, 4))), p.scope(""))


def test_conv_param_count_example():
    b = ParamBuilder(None)
    b.conv("c", 16, 8, 3)
    assert param_count(b.shapes()) == 1168
    assert param_count({}) == 0


# patch embedding


@pytest.mark.parametrize("hw,k,stride,tokens", [(64, 7, 4, 256), (16, 3, 2, 64)])
def test_patch_embed_token_counts(hw, k, stride, tokens):
    p = build(B.init_patch_embed, 3, 8, k)
    out, h, w = B.overlap_patch_embed(t64(np.zeros((1, 3, hw, hw))), p.scope(""), k, stride)
    assert out.shape == (1, tokens, 8) and h * w == tokens


def test_patch_embed_requires_overlap():
    p = build(B.init_patch_embed, 3, 8, 2)
    with pytest.raises(ValueError):
        B.overlap_patch_embed(t64(np.zeros((1, 3, 8, 8))), p.scope(""), 2, 2)


def test_patch_embed_delta_image_reads_kernel_column():
    # one input channel, three output channels and a delta at the centre of a 5x5 image
    p = build(B.init_patch_embed, 1, 3, 3)
    column = np.array([1.0, -1.0, 0.5])
    kernel = np.zeros((3, 1, 3, 3))
    kernel[:, 0, 1, 1] = column
    # the corner tap never lines up with the delta at stride 2
    kernel[:, 0, 0, 0] = [2.0, 0.0, -2.0]
    p["proj.weight"].data[...] = kernel
    p["proj.bias"].data[...] = 0
    img = np.zeros((1, 1, 5, 5))
    img[0, 0, 2, 2] = 1.0
    tokens, h, w_ = B.overlap_patch_embed(t64(img), p.scope(""), 3, 2)
    raw = F.conv2d(t64(img), p["proj.weight"], None, 2, 1).data[0].reshape(3, -1).T
    # centre output pixel (1, 1) sees the delta at the kernel centre
    np.testing.assert_array_equal(raw[1 * w_ + 1], column)
    # normalized tokens equal the layer-normed kernel column
    expected = (column - column.mean()) / np.sqrt(column.var() + 1e-6)
    np.testing.assert_allclose(tokens.data[0, 1 * w_ + 1], expected, atol=1e-12)


# attention


def attn_params(dim, heads, seed=0):
    cfg = B.AttentionConfig(heads)
    return build(B.init_linear_sra, dim, cfg, seed=seed), cfg


def test_single_token_attention_is_value_path(rng):
    p, cfg = attn_params(8, 2)
    tok = t64(rng.normal(size=(1, 1, 8)))
    out, weights = B.linear_sra_attention(tok, 1, 1, cfg, p.scope(""), return_weights=True)
    red = B._reduced_tokens(tok, 1, 1, cfg, p.scope(""))
    v = F.linear(red, p["v.weight"], p["v.bias"]).data[:, :1]
    expected = F.linear(t64(v), p["proj.weight"], p["proj.bias"]).data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    # 49 identical keys share the weight equally
    np.testing.assert_array_equal(weights.data, np.full(weights.shape, 1 / 49))


def test_attention_rows_sum_to_one(rng):
    p, cfg = attn_params(16, 4)
    tok = t64(rng.normal(size=(2, 36, 16)))
    out, weights = B.linear_sra_attention(tok, 6, 6, cfg, p.scope(""), return_weights=True)
    assert out.shape == (2, 36, 16)
    assert weights.shape == (2, 4, 36, 49)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_token_grid_mismatch():
    p, cfg = attn_params(8, 2)
    with pytest.raises(ShapeError):
        B.linear_sra_attention(t64(np.zeros((1, 10, 8))), 3, 3, cfg, p.scope(""))


def test_sr_conv_before_pool_equals_pool_before_conv(rng):
    p, cfg = attn_params(8, 2)
    grid = t64(rng.normal(size=(1, 8, 10, 9)))
    a = F.adaptive_avg_pool2d(F.conv2d(grid, p["sr.weight"], p["sr.bias"]), 7, 7).data
    b = F.conv2d(F.adaptive_avg_pool2d(grid, 7, 7), p["sr.weight"], p["sr.bias"]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# Mix-FFN


def test_mix_ffn_shape(rng):
    p = build(B.init_mix_ffn, 8, 4)
    out = B.mix_ffn(t64(rng.normal(size=(1, 16, 8))), 4, 4, p.scope(""))
    assert out.shape == (1, 16, 8)


def test_mix_ffn_translation_equivariance_away_from_borders(rng):
    p = build(B.init_mix_ffn, 4, 2)
    for k in ("fc1.bias", "dwconv.bias"):
        p[k].data[...] = 0
    h = w = 12
    pattern = np.zeros((1, h, w, 4))
    pattern[0, 4:6, 3:6] = rng.normal(size=(2, 3, 4))
    shifted = np.roll(pattern, (2, 3), axis=(1, 2))
    a = B.mix_ffn_hidden(t64(pattern.reshape(1, h * w, 4)), h, w, p.scope("")).data
    b = B.mix_ffn_hidden(t64(shifted.reshape(1, h * w, 4)), h, w, p.scope("")).data
    np.testing.assert_allclose(np.roll(a, (2, 3), axis=(2, 3))[..., 2:-2, 2:-2], b[..., 2:-2, 2:-2],
                               atol=1e-12)


def test_mix_ffn_zero_padding_breaks_translation_at_border(rng):
    p = build(B.init_mix_ffn, 4, 2)
    h = w = 6
    const = np.ones((1, h * w, 4))
    hidden = B.mix_ffn_hidden(t64(const), h, w, p.scope("")).data
    # a constant input gives different activations at the border than inside
    assert not np.allclose(hidden[..., 0, 0], hidden[..., 3, 3])


# LE and SFA


def test_le_level0_keeps_size_and_deep_level_upsamples(rng):
    p = build(B.init_local_emphasis, 16)
    out0 = B.local_emphasis(t64(rng.normal(size=(1, 16, 16, 16))), (16, 16), p.scope(""))
    assert out0.shape == (1, 64, 16, 16)
    p3 = build(B.init_local_emphasis, 128)
    out3 = B.local_emphasis(t64(rng.normal(size=(1, 128, 2, 2))), (16, 16), p3.scope(""))
    assert out3.shape == (1, 64, 16, 16)


def test_sfa_zero_inputs_zero_weights_give_zero():
    p = build(B.init_stepwise_aggregate)
    for k in p:
        p[k].data[...] = 0
    les = [t64(np.zeros((3, 64, 4, 4))) for _ in range(4)]
    out = B.stepwise_aggregate(les, p.scope(""))
    assert out.shape == (3, 64, 4, 4)
    np.testing.assert_array_equal(out.data, 0.0)


def test_sfa_shape_mismatch():
    p = build(B.init_stepwise_aggregate)
    les = [t64(np.zeros((1, 64, 4, 4)))] * 3 + [t64(np.zeros((1, 64, 2, 2)))]
    with pytest.raises(ShapeError):
        B.stepwise_aggregate(les, p.scope(""))


def test_blocks_are_deterministic(rng):
    p = build(B.init_encoder_block, 16, B.AttentionConfig(2), 4)
    x = t64(rng.normal(size=(2, 16, 16)))
    a = B.encoder_block(x, 4, 4, B.AttentionConfig(2), p.scope("")).data
    b = B.encoder_block(x, 4, 4, B.AttentionConfig(2), p.scope("")).data
    assert a.tobytes() == b.tobytes() and a.shape == (2, 16, 16)
