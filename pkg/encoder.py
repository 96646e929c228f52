#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Post-norm Transformer encoder built on tensor_autodiff.

Token + learned position embeddings feed a stack of blocks (multi-head
self-attention, then a GELU feed-forward, each wrapped in residual +
layer-norm). An optional FusionHook transforms the hidden states at one
layer boundary. The classifier head pools the CLS position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import tensor_autodiff as ad
from errors import AttentionMaskError, ConfigValidationError, FusionModeError, ShapeMismatchError
from tensor_autodiff import Parameter, ParameterSet, Tensor

HeadMode = Literal["cls_only", "concat", "late_gate"]
N_CLASSES = 2


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_layers: int = Field(2, ge=1)
    d_model: int = Field(32, ge=1)
    n_heads: int = Field(2, ge=1)
    d_ff: int = Field(64, ge=1)
    max_len: int = Field(16, ge=2)
    vocab_size: int = Field(32, ge=5)
    dropout_rate: float = Field(0.0, ge=0.0, lt=1.0)
    init_std: float = Field(0.02, gt=0.0)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "EncoderConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self


class HeadConfig(BaseModel):
    """Classifier head; `hidden_size` adds one GELU hidden layer."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    hidden_size: Optional[int] = Field(None, ge=1)


@dataclass
class AttentionParams:
    W_q: Parameter
    b_q: Parameter
    W_k: Parameter
    b_k: Parameter
    W_v: Parameter
    b_v: Parameter
    W_o: Parameter
    b_o: Parameter

    @classmethod
    def from_set(cls, params: ParameterSet, prefix: str) -> "AttentionParams":
        return cls(**{name: params[f"{prefix}.{name}"] for name in cls.__dataclass_fields__})


@dataclass
class EncoderBlockParams:
    attn: AttentionParams
    ln1_gain: Parameter
    ln1_bias: Parameter
    W_in: Parameter
    b_in: Parameter
    W_out: Parameter
    b_out: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter

    @classmethod
    def from_set(cls, params: ParameterSet, prefix: str) -> "EncoderBlockParams":
        return cls(
            attn=AttentionParams.from_set(params, f"{prefix}.attn"),
            ln1_gain=params[f"{prefix}.ln1.gain"],
            ln1_bias=params[f"{prefix}.ln1.bias"],
            W_in=params[f"{prefix}.ffn.W_in"],
            b_in=params[f"{prefix}.ffn.b_in"],
            W_out=params[f"{prefix}.ffn.W_out"],
            b_out=params[f"{prefix}.ffn.b_out"],
            ln2_gain=params[f"{prefix}.ln2.gain"],
            ln2_bias=params[f"{prefix}.ln2.bias"],
        )


@dataclass
class FusionHook:
    """Transform applied after `layer_index` completed blocks (0 = embeddings)."""

    layer_index: int
    transform: Callable[[Tensor], Tensor]


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def add_block_params(params: ParameterSet, prefix: str, config: EncoderConfig, rng: np.random.Generator) -> None:
    d, std = config.d_model, config.init_std
    for proj in ("q", "k", "v", "o"):
        params.add(f"{prefix}.attn.W_{proj}", _normal(rng, (d, d), std))
        params.add(f"{prefix}.attn.b_{proj}", np.zeros(d), decay=False)
    params.add(f"{prefix}.ln1.gain", np.ones(d), decay=False)
    params.add(f"{prefix}.ln1.bias", np.zeros(d), decay=False)
    params.add(f"{prefix}.ffn.W_in", _normal(rng, (d, config.d_ff), std))
    params.add(f"{prefix}.ffn.b_in", np.zeros(config.d_ff), decay=False)
    params.add(f"{prefix}.ffn.W_out", _normal(rng, (config.d_ff, d), std))
    params.add(f"{prefix}.ffn.b_out", np.zeros(d), decay=False)
    params.add(f"{prefix}.ln2.gain", np.ones(d), decay=False)
    params.add(f"{prefix}.ln2.bias", np.zeros(d), decay=False)


def init_encoder_params(config: EncoderConfig, rng: np.random.Generator) -> ParameterSet:
    """normal(0, init_std) weights, zero biases, unit layer-norm gains."""
    params = ParameterSet()
    params.add("embeddings.token", _normal(rng, (config.vocab_size, config.d_model), config.init_std))
    params.add("embeddings.position", _normal(rng, (config.max_len, config.d_model), config.init_std))
    for i in range(config.n_layers):
        add_block_params(params, f"blocks.{i}", config, rng)
    return params


def head_input_width(config: EncoderConfig, mode: HeadMode, d_struct: int) -> int:
    return config.d_model + d_struct if mode == "concat" else config.d_model


def add_head_params(
    params: ParameterSet,
    config: EncoderConfig,
    head: HeadConfig,
    mode: HeadMode,
    d_struct: int,
    rng: np.random.Generator,
) -> None:
    std = config.init_std
    width = head_input_width(config, mode, d_struct)
    if mode == "late_gate":
        params.add("head.gate.W", _normal(rng, (config.d_model, d_struct), std))
        params.add("head.gate.b", np.zeros(config.d_model), decay=False)
    if head.hidden_size is not None:
        params.add("head.hidden.W", _normal(rng, (width, head.hidden_size), std))
        params.add("head.hidden.b", np.zeros(head.hidden_size), decay=False)
        width = head.hidden_size
    params.add("head.W", _normal(rng, (width, N_CLASSES), std))
    params.add("head.b", np.zeros(N_CLASSES), decay=False)


# ---------------------------------------------------------------------------
# Forward computation
# ---------------------------------------------------------------------------

def _check_mask(mask, batch: int, seq_len: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (batch, seq_len):
        raise ShapeMismatchError("attention", (batch, seq_len), mask.shape, "mask must be batch x seq_len")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise AttentionMaskError(f"examples {empty.tolist()} have every position masked")
    return mask


def attention(
    H: Tensor,
    mask,
    params: AttentionParams,
    n_heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product multi-head self-attention; PAD keys get zero weight."""
    if H.ndim != 3:
        raise ShapeMismatchError("attention", H.shape, (), "hidden states must be batch x seq x d_model")
    batch, seq_len, width = H.shape
    if width % n_heads != 0:
        raise ShapeMismatchError("attention", H.shape, (n_heads,), "d_model not divisible by n_heads")
    keep = _check_mask(mask, batch, seq_len)
    head_dim = width // n_heads

    def split_heads(x: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(x, (batch, seq_len, n_heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(H @ params.W_q + params.b_q)
    k = split_heads(H @ params.W_k + params.b_k)
    v = split_heads(H @ params.W_v + params.b_v)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    weights = ad.softmax(scores, mask=keep[:, None, None, :])
    context = ad.matmul(weights, v)
    merged = ad.reshape(ad.transpose(context, (0, 2, 1, 3)), (batch, seq_len, width))
    out = merged @ params.W_o + params.b_o
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, params: EncoderBlockParams) -> Tensor:
    return ad.gelu(x @ params.W_in + params.b_in) @ params.W_out + params.b_out


def encoder_block(
    H: Tensor,
    mask,
    params: EncoderBlockParams,
    n_heads: int,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Post-norm block: LN(H + attn(H)), then LN(x + FFN(x))."""
    attended = ad.dropout(attention(H, mask, params.attn, n_heads), dropout_rate, rng)
    x = ad.layer_norm(H + attended, params.ln1_gain, params.ln1_bias)
    transformed = ad.dropout(feed_forward(x, params), dropout_rate, rng)
    return ad.layer_norm(x + transformed, params.ln2_gain, params.ln2_bias)


def encode(
    token_ids,
    mask,
    config: EncoderConfig,
    params: ParameterSet,
    fusion_hook: Optional[FusionHook] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Embed, run every block, and apply `fusion_hook` at its layer boundary.

    `rng` enables dropout (training); leave it None for evaluation.
    """
    if fusion_hook is not None and not 0 <= fusion_hook.layer_index <= config.n_layers:
        raise ConfigValidationError([(
            "fusion.insert_layer_index",
            f"{fusion_hook.layer_index} is outside [0, {config.n_layers}]",
        )])
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim != 2 or token_ids.shape[1] > config.max_len:
        raise ShapeMismatchError("encode", token_ids.shape, (config.max_len,), "tokens must be batch x seq <= max_len")
    seq_len = token_ids.shape[1]

    hidden = ad.embedding(params["embeddings.token"], token_ids) + ad.embedding(
        params["embeddings.position"], np.arange(seq_len)
    )
    if fusion_hook is not None and fusion_hook.layer_index == 0:
        hidden = fusion_hook.transform(hidden)
    for i in range(config.n_layers):
        block = EncoderBlockParams.from_set(params, f"blocks.{i}")
        hidden = encoder_block(hidden, mask, block, config.n_heads, config.dropout_rate, rng)
        if fusion_hook is not None and fusion_hook.layer_index == i + 1:
            hidden = fusion_hook.transform(hidden)
    return hidden


def classify(H: Tensor, aux: Optional[np.ndarray], params: ParameterSet, mode: HeadMode) -> Tensor:
    """Two logits per example from the CLS vector, optionally fused with aux.

    cls_only: CLS only. concat: CLS concatenated with aux. late_gate: CLS
    scaled elementwise by sigmoid(W_gate aux + b_gate).
    """
    if mode not in ("cls_only", "concat", "late_gate"):
        raise FusionModeError(f"unknown head mode '{mode}'")
    if (aux is None) != (mode == "cls_only"):
        raise FusionModeError(f"head mode '{mode}' {'requires' if aux is None else 'does not accept'} aux features")

    pooled = ad.select(H, 0, axis=1)
    if mode == "concat":
        aux_t = Tensor(aux)
        if aux_t.ndim != 2 or aux_t.shape[0] != pooled.shape[0]:
            raise ShapeMismatchError("classify", pooled.shape, aux_t.shape, "aux must be batch x d_struct")
        pooled = ad.concat([pooled, aux_t], axis=-1)
    elif mode == "late_gate":
        gate_w = params["head.gate.W"]
        aux_t = Tensor(aux)
        if aux_t.ndim != 2 or aux_t.shape != (pooled.shape[0], gate_w.shape[1]):
            raise ShapeMismatchError("classify", gate_w.shape, aux_t.shape, "aux width must match gate input")
        gate = ad.sigmoid(aux_t @ ad.transpose(gate_w) + params["head.gate.b"])
        pooled = pooled * gate

    if "head.hidden.W" in params:
        pooled = ad.gelu(pooled @ params["head.hidden.W"] + params["head.hidden.b"])
    return pooled @ params["head.W"] + params["head.b"]
