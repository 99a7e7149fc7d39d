"""Encoder correctness: parameter store discipline, embedding, attention."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointpetl import tensor as T
from pointpetl.backbone import (BackboneConfig, ParameterStore, TokenSequence,
                                attention, desk_config, embed_patches,
                                encoder_layer, forward, init_backbone,
                                is_backbone_param, paper_scale_config)
from pointpetl.errors import ConfigError, ShapeError
from pointpetl.tensor import Rng, Tensor, gradcheck

TINY = BackboneConfig(depth=2, dim=16, heads=2, ffn_ratio=2, patches=4, patch_size=4)


def tiny_inputs(seed=5, batch=2, cfg=TINY):
    rng = Rng(seed)
    groups = rng.split(0).normal((batch, cfg.patches, cfg.patch_size, 3), scale=0.3)
    centers = rng.split(1).normal((batch, cfg.patches, 3), scale=0.5)
    return groups, centers


# ---------------------------------------------------------------- configs

def test_config_rejects_bad_shapes():
    with pytest.raises(ConfigError):
        BackboneConfig(depth=0)
    with pytest.raises(ConfigError):
        BackboneConfig(dim=30, heads=4)  # not a multiple
    with pytest.raises(ConfigError):
        BackboneConfig(patches=0)
    with pytest.raises(ConfigError):
        BackboneConfig(ffn_ratio=0)


def test_preset_configs():
    assert desk_config().dim == 96 and desk_config().depth == 6
    p = paper_scale_config()
    assert (p.depth, p.dim, p.heads) == (12, 384, 6)


# ------------------------------------------------------------------ store

def test_store_rejects_duplicates():
    s = ParameterStore()
    s.add("a", np.zeros(3))
    with pytest.raises(ConfigError):
        s.add("a", np.zeros(3))


def test_store_mask_is_one_shot():
    s = ParameterStore()
    s.add("a", np.zeros(3))
    s.add("b", np.zeros(2), tunable=True)
    s.set_tunable(["a"])
    assert s.is_tunable("a") and not s.is_tunable("b")
    assert s["a"].requires_grad and not s["b"].requires_grad
    with pytest.raises(ConfigError):
        s.set_tunable(["b"])


def test_store_mask_rejects_unknown_names():
    s = ParameterStore()
    s.add("a", np.zeros(3))
    with pytest.raises(ConfigError):
        s.set_tunable(["a", "ghost"])


def test_store_counts():
    s = ParameterStore()
    s.add("a", np.zeros((2, 3)))
    s.add("b", np.ones(5))
    s.set_tunable(["b"])
    assert s.n_params() == 11 and s.n_tunable() == 5
    assert s.tunable_names() == ["b"]


def test_frozen_checksum_tracks_frozen_tensors_only():
    s = ParameterStore()
    s.add("w", np.ones(4))
    s.add("h", np.zeros(2))
    s.set_tunable(["h"])
    ref = s.frozen_checksum()
    s["h"].data[:] = 9.0  # tunable: checksum must not move
    assert s.frozen_checksum() == ref
    s["w"].data[0] = 2.0
    assert s.frozen_checksum() != ref


def test_load_array_shape_guard():
    s = ParameterStore()
    s.add("w", np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        s.load_array("w", np.zeros(3))


# --------------------------------------------------------------- sequence

def test_token_sequence_slots():
    seq = TokenSequence(Tensor(np.zeros((2, 8, 4))), n_prompts=3, n_patches=4)
    assert seq.cls_slot == 0
    assert seq.prompt_slots == slice(1, 4)
    assert seq.patch_slots == slice(4, 8)


def test_token_sequence_length_guard():
    with pytest.raises(ShapeError):
        TokenSequence(Tensor(np.zeros((2, 8, 4))), n_prompts=1, n_patches=4)


# ---------------------------------------------------------------- embedding

def test_zeroed_embedding_maps_any_patch_to_zero_token():
    store = init_backbone(TINY, Rng(0))
    for name in ("embed.fc1.weight", "embed.fc1.bias", "embed.fc2.weight",
                 "embed.fc2.bias", "pos.fc1.weight", "pos.fc2.weight"):
        store[name].data[:] = 0.0
    groups, centers = tiny_inputs()
    tokens = embed_patches(store, TINY, groups, centers)
    patch_tokens = tokens.data[:, 1:]
    assert np.array_equal(patch_tokens, np.zeros_like(patch_tokens))
    expect_cls = store["cls.token"].data + store["cls.pos"].data
    assert np.array_equal(tokens.data[:, 0], np.broadcast_to(expect_cls, (2, TINY.dim)))


def test_embedding_invariant_to_point_order_within_patch():
    store = init_backbone(TINY, Rng(0))
    groups, centers = tiny_inputs()
    ref = embed_patches(store, TINY, groups, centers).data
    perm = Rng(9).permutation(TINY.patch_size)
    out = embed_patches(store, TINY, groups[:, :, perm, :], centers).data
    assert np.array_equal(out, ref)  # max-pool over points is order-free


def test_embedding_equivariant_to_patch_order():
    store = init_backbone(TINY, Rng(0))
    groups, centers = tiny_inputs()
    ref = embed_patches(store, TINY, groups, centers).data
    perm = Rng(11).permutation(TINY.patches)
    out = embed_patches(store, TINY, groups[:, perm], centers[:, perm]).data
    assert np.array_equal(out[:, 1:], ref[:, 1:][:, perm])
    assert np.array_equal(out[:, 0], ref[:, 0])


def test_embedding_shape_guard():
    store = init_backbone(TINY, Rng(0))
    with pytest.raises(ShapeError):
        embed_patches(store, TINY, np.zeros((2, 3, 4, 3)), np.zeros((2, 3, 3)))


# ---------------------------------------------------------------- attention

def test_attention_probabilities_are_rowwise_distributions():
    store = init_backbone(TINY, Rng(2))
    groups, centers = tiny_inputs()
    x = embed_patches(store, TINY, groups, centers)
    cap = {}
    attention(store, TINY, 1, x, capture=cap)
    probs = cap["attn"][1]
    t = 1 + TINY.patches
    assert probs.shape == (2, TINY.heads, t, t)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_uniform_when_queries_and_keys_vanish():
    store = init_backbone(TINY, Rng(2))
    store["blocks.1.attn.q.weight"].data[:] = 0.0
    store["blocks.1.attn.q.bias"].data[:] = 0.0
    groups, centers = tiny_inputs()
    x = embed_patches(store, TINY, groups, centers)
    cap = {}
    attention(store, TINY, 1, x, capture=cap)
    t = 1 + TINY.patches
    assert np.array_equal(cap["attn"][1], np.full((2, TINY.heads, t, t), 1.0 / t))


def test_attention_with_identity_value_path_averages_tokens():
    # zero scores -> uniform probs; v = x and out-proj = identity -> every
    # token becomes the sequence mean
    store = init_backbone(TINY, Rng(2))
    d = TINY.dim
    for nm in ("q", "k"):
        store[f"blocks.1.attn.{nm}.weight"].data[:] = 0.0
        store[f"blocks.1.attn.{nm}.bias"].data[:] = 0.0
    store["blocks.1.attn.v.weight"].data[:] = np.eye(d)
    store["blocks.1.attn.v.bias"].data[:] = 0.0
    store["blocks.1.attn.out.weight"].data[:] = np.eye(d)
    store["blocks.1.attn.out.bias"].data[:] = 0.0
    rng = Rng(3)
    x = Tensor(rng.normal((2, 5, d)))
    out = attention(store, TINY, 1, x)
    expect = np.repeat(x.data.mean(axis=1, keepdims=True), 5, axis=1)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_encoder_layer_is_identity_when_branch_outputs_are_zeroed():
    store = init_backbone(TINY, Rng(4))
    for name in ("attn.out.weight", "attn.out.bias", "ffn.fc2.weight", "ffn.fc2.bias"):
        store[f"blocks.1.{name}"].data[:] = 0.0
    x = Tensor(Rng(6).normal((2, 7, TINY.dim)))
    out = encoder_layer(store, TINY, 1, x)
    assert np.array_equal(out.data, x.data)


# ------------------------------------------------------------------ forward

def test_forward_shapes_and_final_norm():
    store = init_backbone(TINY, Rng(1))
    groups, centers = tiny_inputs()
    seq = forward(store, TINY, groups, centers)
    assert seq.tokens.shape == (2, 1 + TINY.patches, TINY.dim)
    assert seq.n_prompts == 0 and seq.n_patches == TINY.patches
    np.testing.assert_allclose(seq.tokens.data.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(seq.tokens.data.var(axis=-1), 1.0, atol=1e-3)


def test_forward_is_bit_deterministic():
    store = init_backbone(TINY, Rng(1))
    groups, centers = tiny_inputs()
    a = forward(store, TINY, groups, centers).tokens.data
    b = forward(store, TINY, groups, centers).tokens.data
    assert np.array_equal(a, b)


def test_init_reproducible_and_seed_sensitive():
    a = init_backbone(TINY, Rng(0))
    b = init_backbone(TINY, Rng(0))
    c = init_backbone(TINY, Rng(1))
    for name in a.names():
        assert np.array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())


def test_backbone_gradients_match_finite_differences():
    store = init_backbone(TINY, Rng(1))
    groups, centers = tiny_inputs()
    picked = ["cls.token", "blocks.1.ln1.gamma", "blocks.2.attn.v.bias",
              "blocks.1.ffn.fc2.bias", "final_ln.beta"]
    params = [store[n] for n in picked]
    for p in params:
        p.requires_grad = True

    def loss():
        seq = forward(store, TINY, groups, centers)
        return T.mean_pool(seq.tokens * seq.tokens)

    res = gradcheck(loss, params, names=picked)
    assert res.max_err < 1e-4, res


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_forward_finite_for_random_inputs(seed):
    store = init_backbone(TINY, Rng(123))
    rng = Rng(seed)
    groups = rng.split(0).normal((1, TINY.patches, TINY.patch_size, 3))
    centers = rng.split(1).normal((1, TINY.patches, 3))
    seq = forward(store, TINY, groups, centers)
    assert np.all(np.isfinite(seq.tokens.data))


def test_is_backbone_param():
    assert is_backbone_param("blocks.3.attn.q.weight")
    assert is_backbone_param("final_ln.gamma")
    assert not is_backbone_param("petl.adapter.1.down.weight")
    assert not is_backbone_param("head.fc1.weight")
