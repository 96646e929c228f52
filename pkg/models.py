#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
The four comparison systems: text-only encoder, concatenation head,
late-gated head, and mid-stack ISFL gating.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import tensor_autodiff as ad
from data_pipeline import Batch, EncodedDataset
from encoder import EncoderConfig, HeadConfig, add_head_params, classify, encode, init_encoder_params
from isfl_fusion import FusionConfig, GateSummary, IsflParams, add_isfl_params, compute_gate, isfl_hook, summarize_gates
from tensor_autodiff import ParameterSet, Tensor

FusionMode = Literal["none", "concat_head", "late_gate", "isfl"]

HEAD_MODES = {
    "none": "cls_only",
    "concat_head": "concat",
    "late_gate": "late_gate",
    "isfl": "cls_only",
}


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    fusion_mode: FusionMode = "isfl"
    fusion: Optional[FusionConfig] = None
    head: HeadConfig = Field(default_factory=HeadConfig)

    @model_validator(mode="before")
    @classmethod
    def _default_fusion(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("fusion_mode", "isfl") == "isfl" and data.get("fusion") is None:
            data = {**data, "fusion": {}}
        return data

    @model_validator(mode="after")
    def _fusion_matches_mode(self) -> "ModelConfig":
        if self.fusion_mode != "isfl" and self.fusion is not None:
            raise ValueError(f"fusion settings are only valid with fusion_mode 'isfl', not '{self.fusion_mode}'")
        if self.fusion is not None:
            index = self.resolved_fusion.insert_layer_index
            if index > self.encoder.n_layers:
                raise ValueError(
                    f"fusion.insert_layer_index {index} exceeds encoder.n_layers {self.encoder.n_layers}"
                )
        return self

    @property
    def resolved_fusion(self) -> Optional[FusionConfig]:
        if self.fusion is None:
            return None
        return self.fusion.resolved(self.encoder.n_layers, self.encoder.d_model)

    @property
    def head_mode(self) -> str:
        return HEAD_MODES[self.fusion_mode]

    @property
    def uses_aux(self) -> bool:
        return self.fusion_mode != "none"


def build_parameters(config: ModelConfig, d_struct: int, seed: int) -> ParameterSet:
    rng = np.random.default_rng(seed)
    params = init_encoder_params(config.encoder, rng)
    if config.fusion_mode == "isfl":
        add_isfl_params(params, config.resolved_fusion, config.encoder.d_model, d_struct, rng, config.encoder.init_std)
    add_head_params(params, config.encoder, config.head, config.head_mode, d_struct, rng)
    return params


def expected_shapes(config: ModelConfig, d_struct: int) -> Dict[str, Tuple[int, ...]]:
    """Parameter name -> shape for a freshly built model of this config."""
    return build_parameters(config, d_struct, seed=0).shapes()


class FusionClassifier:
    """A model configuration bound to its parameters."""

    def __init__(self, config: ModelConfig, d_struct: int, params: ParameterSet):
        self.config = config
        self.d_struct = d_struct
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, d_struct: int, seed: int = 0) -> "FusionClassifier":
        return cls(config, d_struct, build_parameters(config, d_struct, seed))

    def copy(self) -> "FusionClassifier":
        clone = FusionClassifier.initialize(self.config, self.d_struct, seed=0)
        clone.params.load_arrays(self.params.state_arrays())
        return clone

    def isfl_params(self) -> Optional[IsflParams]:
        return IsflParams.from_set(self.params) if self.config.fusion_mode == "isfl" else None


@dataclass
class ForwardOutput:
    logits: Tensor
    probabilities: np.ndarray
    p_class1: np.ndarray


def forward(model: FusionClassifier, batch: Batch, rng: Optional[np.random.Generator] = None) -> ForwardOutput:
    """Logits and softmax probabilities for a tokenized, standardized batch."""
    config = model.config
    hook = None
    if config.fusion_mode == "isfl":
        hook = isfl_hook(batch.aux, model.isfl_params(), config.resolved_fusion)
    hidden = encode(batch.token_ids, batch.mask, config.encoder, model.params, fusion_hook=hook, rng=rng)
    aux = batch.aux if config.head_mode != "cls_only" else None
    logits = classify(hidden, aux, model.params, config.head_mode)
    with ad.no_grad():
        probs = ad.softmax(logits).data
    return ForwardOutput(logits=logits, probabilities=probs, p_class1=probs[:, 1])


def loss_and_output(
    model: FusionClassifier, batch: Batch, rng: Optional[np.random.Generator] = None
) -> Tuple[Tensor, ForwardOutput]:
    """Two-class cross-entropy on the batch logits."""
    output = forward(model, batch, rng=rng)
    return ad.cross_entropy(output.logits, batch.labels), output


def gate_vectors(model: FusionClassifier, batch: Batch) -> Optional[np.ndarray]:
    """Gate vectors the model applies to this batch (isfl and late_gate modes)."""
    with ad.no_grad():
        if model.config.fusion_mode == "isfl":
            fusion = model.config.resolved_fusion
            return compute_gate(batch.aux, model.isfl_params(), fusion.gate_mode).data
        if model.config.fusion_mode == "late_gate":
            aux = Tensor(batch.aux)
            logits = aux @ ad.transpose(model.params["head.gate.W"]) + model.params["head.gate.b"]
            return ad.sigmoid(logits).data
    return None


def inspect_gates(model: FusionClassifier, dataset: EncodedDataset, batch_size: int = 64) -> Optional[GateSummary]:
    if model.config.fusion_mode not in ("isfl", "late_gate") or len(dataset) == 0:
        return None
    chunks = [gate_vectors(model, batch) for batch in dataset.iter_batches(batch_size)]
    return summarize_gates(np.concatenate(chunks, axis=0), dataset.labels)
