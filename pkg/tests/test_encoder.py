import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

import tensor_autodiff as ad
from encoder import (
    AttentionParams,
    EncoderBlockParams,
    EncoderConfig,
    FusionHook,
    attention,
    classify,
    encode,
    encoder_block,
    init_encoder_params,
)
from errors import AttentionMaskError, ConfigValidationError, FusionModeError
from tensor_autodiff import Parameter, Tensor

TOY = EncoderConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_len=8, vocab_size=20, init_std=0.3)


def _tokens(rng, batch=2, seq=8, pad=2):
    ids = rng.integers(4, TOY.vocab_size, size=(batch, seq))
    mask = np.ones((batch, seq), dtype=bool)
    mask[:, seq - pad:] = False
    ids[~mask] = 0
    return ids, mask


def test_encoder_config_requires_divisible_heads():
    with pytest.raises(ValidationError):
        EncoderConfig(d_model=10, n_heads=3)


def test_attention_weights_ignore_padding():
    rng = np.random.default_rng(0)
    params = init_encoder_params(TOY, rng)
    attn = AttentionParams.from_set(params, "blocks.0.attn")
    H = Tensor(rng.normal(size=(2, 8, 16)))
    _, mask = _tokens(rng)

    out, weights = attention(H, mask, attn, TOY.n_heads, return_weights=True)
    assert np.all(weights.data[..., 6:] == 0.0)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)

    changed = H.data.copy()
    changed[:, 6:, :] = rng.normal(size=(2, 2, 16)) * 5
    out_changed = attention(Tensor(changed), mask, attn, TOY.n_heads)
    np.testing.assert_allclose(out_changed.data[:, :6], out.data[:, :6], atol=1e-12)


def test_attention_rejects_fully_masked_example():
    rng = np.random.default_rng(1)
    params = init_encoder_params(TOY, rng)
    mask = np.ones((2, 8), dtype=bool)
    mask[1] = False
    with pytest.raises(AttentionMaskError):
        attention(Tensor(rng.normal(size=(2, 8, 16))), mask, AttentionParams.from_set(params, "blocks.0.attn"), 2)


@pytest.mark.parametrize("seed", range(5))
def test_encoder_block_gradient(seed):
    rng = np.random.default_rng(seed)
    params = init_encoder_params(TOY, rng)
    block = EncoderBlockParams.from_set(params, "blocks.0")
    H = Parameter("H", rng.normal(size=(2, 8, 16)))
    _, mask = _tokens(rng)
    target = rng.normal(size=(2, 8, 16))

    def loss():
        return ad.reduce_sum(encoder_block(H, mask, block, TOY.n_heads) * target)

    checked = [H] + params.with_prefix("blocks.0.")
    assert ad.check_gradient(loss, checked, max_entries=4, seed=seed) < 1e-4


def test_encode_applies_hook_at_each_boundary():
    rng = np.random.default_rng(2)
    params = init_encoder_params(TOY, rng)
    ids, mask = _tokens(rng)
    seen = []

    def recorder(index):
        def transform(hidden):
            seen.append(index)
            return hidden
        return FusionHook(layer_index=index, transform=transform)

    baseline = encode(ids, mask, TOY, params).data
    for index in range(TOY.n_layers + 1):
        np.testing.assert_array_equal(encode(ids, mask, TOY, params, fusion_hook=recorder(index)).data, baseline)
    assert seen == [0, 1, 2]


def test_encode_rejects_out_of_range_hook():
    rng = np.random.default_rng(3)
    params = init_encoder_params(TOY, rng)
    ids, mask = _tokens(rng)
    with pytest.raises(ConfigValidationError):
        encode(ids, mask, TOY, params, fusion_hook=FusionHook(layer_index=3, transform=lambda h: h))


def test_classify_checks_aux_against_mode():
    rng = np.random.default_rng(4)
    H = Tensor(rng.normal(size=(2, 8, 16)))
    params = init_encoder_params(TOY, rng)
    params.add("head.W", rng.normal(size=(16, 2)))
    params.add("head.b", np.zeros(2))

    assert classify(H, None, params, "cls_only").shape == (2, 2)
    with pytest.raises(FusionModeError):
        classify(H, np.zeros((2, 3)), params, "cls_only")
    with pytest.raises(FusionModeError):
        classify(H, None, params, "concat")


def test_attention_matches_brute_force_over_unmasked_keys():
    rng = np.random.default_rng(5)
    params = init_encoder_params(TOY, rng)
    attn = AttentionParams.from_set(params, "blocks.0.attn")
    H = rng.normal(size=(1, 4, 16))
    keep = np.array([[True, False, True, False]])

    out = attention(Tensor(H), keep, attn, TOY.n_heads).data

    x = H[0]
    q = x @ attn.W_q.data + attn.b_q.data
    k = x @ attn.W_k.data + attn.b_k.data
    v = x @ attn.W_v.data + attn.b_v.data
    head_dim = 16 // TOY.n_heads
    visible = np.flatnonzero(keep[0])
    heads = []
    for h in range(TOY.n_heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        context = np.zeros((4, head_dim))
        for t in range(4):
            scores = np.array([q[t, cols] @ k[j, cols] for j in visible]) / np.sqrt(head_dim)
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            context[t] = sum(w * v[j, cols] for w, j in zip(weights, visible))
        heads.append(context)
    expected = np.concatenate(heads, axis=-1) @ attn.W_o.data + attn.b_o.data

    np.testing.assert_allclose(out[0], expected, atol=1e-9)


def test_zero_weight_block_reduces_to_double_layer_norm():
    rng = np.random.default_rng(6)
    params = init_encoder_params(TOY, rng)
    for param in params.with_prefix("blocks.0."):
        if ".ln" not in param.name:
            param.data[...] = 0.0
    block = EncoderBlockParams.from_set(params, "blocks.0")
    H = rng.normal(size=(2, 8, 16))
    _, mask = _tokens(rng)
    ones, zeros = np.ones(16), np.zeros(16)

    out = encoder_block(Tensor(H), mask, block, TOY.n_heads).data
    expected = ad.layer_norm(ad.layer_norm(Tensor(H), ones, zeros), ones, zeros).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_encode_is_batch_equivariant():
    rng = np.random.default_rng(7)
    params = init_encoder_params(TOY, rng)
    ids, mask = _tokens(rng, batch=4)
    mask[1, 3:] = False
    ids[1, 3:] = 0
    order = np.array([2, 0, 3, 1])

    out = encode(ids, mask, TOY, params).data
    permuted = encode(ids[order], mask[order], TOY, params).data
    np.testing.assert_allclose(permuted, out[order], atol=1e-12)
