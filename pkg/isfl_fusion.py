#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Intermediate fusion layer: structural features -> sigmoid gate -> mid-stack modulation.

The gate g = sigmoid(W_gate . aux + b_gate) has one d_model vector per
example and is broadcast over every sequence position of the hidden states
produced by the preceding block: H'[b, t, :] = H[b, t, :] * g[b, :].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import tensor_autodiff as ad
from encoder import FusionHook
from errors import ConfigValidationError, ShapeMismatchError
from tensor_autodiff import Parameter, ParameterSet, Tensor

GateMode = Literal["single_affine", "two_layer"]

# Largest float64 strictly below 1; keeps saturated gates inside (0, 1).
GATE_CEILING = float(np.nextafter(1.0, 0.0))
GATE_FLOOR = float(np.finfo(np.float64).tiny)


class FusionConfig(BaseModel):
    """Where and how the gate is applied.

    insert_layer_index counts completed blocks: 0 gates the embeddings,
    n_layers gates the final states. None resolves to n_layers // 2.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    insert_layer_index: Optional[int] = Field(None, ge=0)
    gate_mode: GateMode = "single_affine"
    gate_hidden: Optional[int] = Field(None, ge=1)

    def resolved(self, n_layers: int, d_model: int) -> "FusionConfig":
        index = n_layers // 2 if self.insert_layer_index is None else self.insert_layer_index
        hidden = self.gate_hidden if self.gate_hidden is not None else d_model
        return self.model_copy(update={"insert_layer_index": index, "gate_hidden": hidden})


@dataclass
class IsflParams:
    W_gate: Parameter
    b_gate: Parameter
    hidden_W: Optional[Parameter] = None
    hidden_b: Optional[Parameter] = None

    @classmethod
    def from_set(cls, params: ParameterSet) -> "IsflParams":
        return cls(
            W_gate=params["isfl.W_gate"],
            b_gate=params["isfl.b_gate"],
            hidden_W=params.get("isfl.hidden.W"),
            hidden_b=params.get("isfl.hidden.b"),
        )

    @property
    def d_model(self) -> int:
        return int(self.W_gate.shape[0])

    @property
    def d_struct(self) -> int:
        source = self.hidden_W if self.hidden_W is not None else self.W_gate
        return int(source.shape[1])


def add_isfl_params(
    params: ParameterSet,
    config: FusionConfig,
    d_model: int,
    d_struct: int,
    rng: np.random.Generator,
    init_std: float = 0.02,
) -> None:
    """Register `isfl.W_gate` (d_model x input) and `isfl.b_gate`, plus `isfl.hidden.*` in two_layer mode."""
    gate_input = d_struct
    if config.gate_mode == "two_layer":
        hidden = config.gate_hidden or d_model
        params.add("isfl.hidden.W", rng.normal(0.0, init_std, size=(hidden, d_struct)))
        params.add("isfl.hidden.b", np.zeros(hidden), decay=False)
        gate_input = hidden
    params.add("isfl.W_gate", rng.normal(0.0, init_std, size=(d_model, gate_input)))
    params.add("isfl.b_gate", np.zeros(d_model), decay=False)


def compute_gate(aux, params: IsflParams, mode: GateMode = "single_affine") -> Tensor:
    """Per-example gate vectors (batch x d_model), every entry strictly in (0, 1)."""
    aux_t = aux if isinstance(aux, Tensor) else Tensor(aux)
    if aux_t.ndim == 1:
        aux_t = ad.reshape(aux_t, (1, aux_t.shape[0]))
    if aux_t.ndim != 2 or aux_t.shape[1] != params.d_struct:
        raise ShapeMismatchError("compute_gate", aux_t.shape, (params.d_struct,), "aux width must equal d_struct")

    features = aux_t
    if mode == "two_layer":
        if params.hidden_W is None or params.hidden_b is None:
            raise ShapeMismatchError("compute_gate", params.W_gate.shape, (), "two_layer mode needs isfl.hidden.*")
        features = ad.gelu(features @ ad.transpose(params.hidden_W) + params.hidden_b)
    elif mode != "single_affine":
        raise ConfigValidationError([("fusion.gate_mode", f"unknown gate mode '{mode}'")])

    logits = features @ ad.transpose(params.W_gate) + params.b_gate
    return ad.clip(ad.sigmoid(logits), GATE_FLOOR, GATE_CEILING)


def modulate(H: Tensor, g) -> Tensor:
    """H'[b, t, d] = H[b, t, d] * g[b, d] for every position t."""
    gate = g if isinstance(g, Tensor) else Tensor(g)
    if H.ndim != 3 or gate.ndim != 2:
        raise ShapeMismatchError("modulate", H.shape, gate.shape, "expected batch x seq x d and batch x d")
    if gate.shape[0] != H.shape[0]:
        raise ShapeMismatchError("modulate", H.shape, gate.shape, "batch sizes differ")
    if gate.shape[1] != H.shape[2]:
        raise ShapeMismatchError("modulate", H.shape, gate.shape, "gate width differs from d_model")
    return H * ad.reshape(gate, (gate.shape[0], 1, gate.shape[1]))


def isfl_hook(aux, params: IsflParams, config: FusionConfig) -> FusionHook:
    """Bind gate generation and modulation for one batch at the configured boundary."""
    if config.insert_layer_index is None:
        raise ConfigValidationError([("fusion.insert_layer_index", "must be resolved before building the hook")])

    def _transform(hidden: Tensor) -> Tensor:
        return modulate(hidden, compute_gate(aux, params, config.gate_mode))

    return FusionHook(layer_index=config.insert_layer_index, transform=_transform)


@dataclass
class GateSummary:
    """Descriptive statistics of gate vectors over a dataset."""

    n_examples: int
    mean: float
    minimum: float
    maximum: float
    per_class_mean: Dict[int, float] = field(default_factory=dict)
    mean_abs_class_difference: float = 0.0

    def to_dict(self) -> Dict[str, object]:
        return {
            "n_examples": self.n_examples,
            "mean": self.mean,
            "min": self.minimum,
            "max": self.maximum,
            "per_class_mean": {str(k): v for k, v in self.per_class_mean.items()},
            "mean_abs_class_difference": self.mean_abs_class_difference,
        }


def summarize_gates(gates: np.ndarray, labels: np.ndarray) -> GateSummary:
    """Overall and per-class gate statistics.

    mean_abs_class_difference averages |mean gate(class 1) - mean gate(class 0)|
    over channels; 0 when a class is absent.
    """
    gates = np.asarray(gates, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    per_class: Dict[int, float] = {}
    channel_means: Dict[int, np.ndarray] = {}
    for cls in (0, 1):
        members = gates[labels == cls]
        if members.size:
            per_class[cls] = float(members.mean())
            channel_means[cls] = members.mean(axis=0)
    difference = (
        float(np.abs(channel_means[1] - channel_means[0]).mean()) if len(channel_means) == 2 else 0.0
    )
    return GateSummary(
        n_examples=int(gates.shape[0]),
        mean=float(gates.mean()) if gates.size else 0.0,
        minimum=float(gates.min()) if gates.size else 0.0,
        maximum=float(gates.max()) if gates.size else 0.0,
        per_class_mean=per_class,
        mean_abs_class_difference=difference,
    )
