"""Backbone unit tests: patch arithmetic, positional tables, taps, freezing."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dcq.backbone import (
    BackboneConfig,
    SelfAttention,
    VisionBackbone,
    patchify,
    sincos_1d,
    sincos_2d,
    unpatchify,
)
from dcq.common import ConfigError, ShapeError, token_layernorm


def small_backbone(depth=3, image_size=16, patch_size=8, dim=32, heads=2):
    torch.manual_seed(0)
    return VisionBackbone(
        BackboneConfig(image_size=image_size, patch_size=patch_size, depth=depth, dim=dim, heads=heads)
    )


# ---------------------------------------------------------------- patchify


def test_patchify_roundtrip_is_exact():
    g = torch.Generator().manual_seed(1)
    images = torch.randn(2, 16, 24, 3, generator=g)
    tokens = patchify(images, 8)
    assert tokens.shape == (2, 2 * 3, 8 * 8 * 3)
    assert torch.equal(unpatchify(tokens, 8, 2, 3), images)


def test_patchify_token_order_is_row_major():
    # Pixel value encodes its grid cell, so each token must be constant
    # and tokens must march left-to-right, then top-to-bottom.
    p, gh, gw = 2, 2, 3
    image = torch.zeros(1, gh * p, gw * p, 1)
    for r in range(gh):
        for c in range(gw):
            image[0, r * p : (r + 1) * p, c * p : (c + 1) * p, 0] = r * gw + c
    tokens = patchify(image, p)
    for t in range(gh * gw):
        assert torch.all(tokens[0, t] == t)


def test_patchify_within_patch_layout():
    # Inside one patch, values are flattened row-major with channels last.
    p = 2
    image = torch.arange(p * p * 2, dtype=torch.float32).reshape(1, p, p, 2)
    tokens = patchify(image, p)
    assert torch.equal(tokens[0, 0], image.reshape(-1))


@pytest.mark.parametrize(
    "shape,message",
    [
        ((16, 16, 3), "4d"),
        ((1, 15, 16, 3), "height"),
        ((1, 16, 15, 3), "width"),
    ],
)
def test_patchify_shape_errors(shape, message):
    with pytest.raises(ShapeError, match=message):
        patchify(torch.zeros(*shape), 8)


def test_unpatchify_shape_errors():
    with pytest.raises(ShapeError, match="3d"):
        unpatchify(torch.zeros(4, 12), 2, 2, 1)
    with pytest.raises(ShapeError, match="grid"):
        unpatchify(torch.zeros(1, 5, 12), 2, 2, 2)
    with pytest.raises(ShapeError, match="patch"):
        unpatchify(torch.zeros(1, 4, 13), 2, 2, 2)


def test_unpatchify_places_tokens_on_grid():
    # Token t must land at grid cell (t // gw, t % gw).
    p, gh, gw = 2, 3, 2
    tokens = torch.stack([torch.full((p * p * 3,), float(t)) for t in range(gh * gw)]).unsqueeze(0)
    image = unpatchify(tokens, p, gh, gw)
    for t in range(gh * gw):
        r, c = divmod(t, gw)
        assert torch.all(image[0, r * p : (r + 1) * p, c * p : (c + 1) * p] == t)


# ---------------------------------------------------------------- sin-cos tables


def test_sincos_1d_halves_are_sin_then_cos():
    dim = 8
    pos = np.array([0.0, 1.0, 5.0])
    table = sincos_1d(dim, pos)
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    np.testing.assert_allclose(table[:, :half], np.sin(np.outer(pos, freqs)), atol=1e-12)
    np.testing.assert_allclose(table[:, half:], np.cos(np.outer(pos, freqs)), atol=1e-12)


def test_sincos_1d_rejects_odd_dim():
    with pytest.raises(ConfigError, match="even"):
        sincos_1d(7, np.arange(3))


def test_sincos_2d_is_concat_of_row_and_column_tables():
    dim, gh, gw = 16, 3, 4
    table = sincos_2d(dim, gh, gw)
    assert table.shape == (gh * gw, dim)
    for t in range(gh * gw):
        r, c = divmod(t, gw)
        row_emb = sincos_1d(dim // 2, np.array([r]))[0]
        col_emb = sincos_1d(dim // 2, np.array([c]))[0]
        np.testing.assert_allclose(table[t], np.concatenate([row_emb, col_emb]), atol=1e-6)


def test_sincos_2d_rejects_bad_dim():
    with pytest.raises(ConfigError, match="divisible by 4"):
        sincos_2d(10, 2, 2)


# ---------------------------------------------------------------- self-attention oracle


def test_self_attention_matches_per_head_loop():
    torch.manual_seed(3)
    attn = SelfAttention(dim=12, heads=3).double()
    x = torch.randn(2, 5, 12, dtype=torch.float64)
    got = attn(x)

    hd = attn.head_dim
    expected = torch.zeros(2, 5, 12, dtype=torch.float64)
    q_all = x @ attn.q.weight.T + attn.q.bias
    k_all = x @ attn.k.weight.T + attn.k.bias
    v_all = x @ attn.v.weight.T + attn.v.bias
    for b in range(2):
        heads_out = []
        for h in range(attn.heads):
            sl = slice(h * hd, (h + 1) * hd)
            q, k, v = q_all[b, :, sl], k_all[b, :, sl], v_all[b, :, sl]
            scores = (q @ k.T) / math.sqrt(hd)
            weights = torch.softmax(scores, dim=-1)
            assert torch.allclose(weights.sum(dim=-1), torch.ones(5, dtype=torch.float64))
            heads_out.append(weights @ v)
        expected[b] = torch.cat(heads_out, dim=-1) @ attn.o.weight.T + attn.o.bias
    assert torch.allclose(got, expected, atol=1e-10)


def test_self_attention_rejects_indivisible_heads():
    with pytest.raises(ConfigError, match="heads"):
        SelfAttention(dim=10, heads=3)


# ---------------------------------------------------------------- backbone taps


def test_tap_zero_is_patch_embedding_plus_positions():
    bb = small_backbone()
    g = torch.Generator().manual_seed(2)
    images = torch.randn(2, 16, 16, 3, generator=g)
    _, states = bb.forward_with_taps(images, [0])
    assert torch.equal(states[0], bb.embed(images))


def test_tap_l_is_input_to_block_l():
    bb = small_backbone(depth=4)
    g = torch.Generator().manual_seed(4)
    images = torch.randn(2, 16, 16, 3, generator=g)
    _, states = bb.forward_with_taps(images, [0, 2, 3])
    x = bb.embed(images)
    expected = {0: x}
    for layer, block in enumerate(bb.blocks):
        expected[layer] = x
        x = block(x)
    assert torch.equal(states[0], expected[0])
    assert torch.equal(states[1], expected[2])
    assert torch.equal(states[2], expected[3])


def test_taps_returned_in_requested_order():
    bb = small_backbone(depth=4)
    images = torch.randn(1, 16, 16, 3)
    _, forward_order = bb.forward_with_taps(images, [1, 3])
    _, reverse_order = bb.forward_with_taps(images, [3, 1])
    assert torch.equal(forward_order[0], reverse_order[1])
    assert torch.equal(forward_order[1], reverse_order[0])


def test_final_features_do_not_depend_on_tap_selection():
    bb = small_backbone(depth=4)
    g = torch.Generator().manual_seed(5)
    images = torch.randn(3, 16, 16, 3, generator=g)
    plain = bb(images)
    tapped, _ = bb.forward_with_taps(images, [0, 1, 2, 3])
    assert torch.equal(plain, tapped)


def test_tap_out_of_range_names_valid_range():
    bb = small_backbone(depth=3)
    with pytest.raises(ConfigError, match=r"valid taps are 0\.\.2"):
        bb.forward_with_taps(torch.zeros(1, 16, 16, 3), [3])


def test_embed_rejects_wrong_image_size():
    bb = small_backbone()
    with pytest.raises(ShapeError, match="image size"):
        bb.embed(torch.zeros(1, 32, 32, 3))


def test_backbone_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        BackboneConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigError, match="depth"):
        BackboneConfig(depth=0)
    cfg = BackboneConfig(image_size=32, patch_size=8, dim=64)
    assert cfg.ffn_dim == 256
    assert cfg.grid == 4
    assert cfg.n_patches == 16


def test_freeze_stops_gradients_and_returns_self():
    bb = small_backbone()
    assert not bb.is_frozen
    out = bb.freeze()
    assert out is bb
    assert bb.is_frozen
    assert not bb.training
    assert all(not p.requires_grad for p in bb.parameters())


# ---------------------------------------------------------------- token layer norm


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_token_layernorm_centers_and_scales(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 4, 32, generator=g) * 3.0 + 1.5
    y = token_layernorm(x)
    assert torch.allclose(y.mean(dim=-1), torch.zeros(2, 4), atol=1e-5)
    # Biased variance over the channel axis is 1 (up to the eps stabilizer).
    assert torch.allclose(y.var(dim=-1, unbiased=False), torch.ones(2, 4), atol=1e-3)


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 10**6),
    scale=st.floats(0.5, 2.0),
    shift=st.floats(-3.0, 3.0),
)
def test_token_layernorm_invariant_to_per_token_affine(seed, scale, shift):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 3, 64, generator=g)
    assert torch.allclose(token_layernorm(scale * x + shift), token_layernorm(x), atol=1e-4)
