#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
AdamW training loop and evaluation for FusionClassifier models.

Every epoch visits the training set in a fresh permutation drawn from the
seeded generator, so a run is reproducible from (config, data, seed).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import tensor_autodiff as ad
from data_pipeline import EncodedDataset
from errors import NonFiniteGradientError
from metrics import EceConfig, PredictionRecord, confusion_and_threshold_metrics, ece
from models import FusionClassifier, forward, loss_and_output
from tensor_autodiff import ParameterSet

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(1e-3, gt=0)
    epochs: int = Field(5, ge=0)
    batch_size: int = Field(16, ge=1)
    weight_decay: float = Field(0.01, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    epsilon: float = Field(1e-8, gt=0)
    grad_clip: Optional[float] = Field(None, gt=0)
    seed: int = 0


@dataclass
class OptimizerState:
    """First/second moment estimates per parameter name."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))


def check_finite_gradients(grads: Dict[str, np.ndarray]) -> None:
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Dict[str, np.ndarray]:
    """Rescale so the global L2 norm is at most max_norm; a non-finite norm leaves grads untouched."""
    if max_norm is None:
        return grads
    norm = global_norm(grads)
    if not math.isfinite(norm) or norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def adamw_step(
    params: ParameterSet,
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> None:
    """One AdamW update with decoupled weight decay.

    Parameters flagged decay=False (biases, LayerNorm) are not decayed. A
    non-finite gradient raises before any parameter is modified.
    """
    check_finite_gradients(grads)

    beta1, beta2 = config.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    lr = config.learning_rate

    for name, grad in grads.items():
        param = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v

        if param.decay and config.weight_decay:
            param.data *= 1.0 - lr * config.weight_decay
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + config.epsilon)


def train_step(
    model: FusionClassifier,
    batch,
    state: OptimizerState,
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Forward, backward and one optimizer update on a single batch; returns the batch loss."""
    with ad.Tape() as tape:
        loss, _ = loss_and_output(model, batch, rng=rng)
    grads = ad.backward(tape, loss, model.params.values())
    check_finite_gradients(grads)
    adamw_step(model.params, clip_by_global_norm(grads, config.grad_clip), state, config)
    return loss.item()


def evaluate(model: FusionClassifier, dataset: EncodedDataset, batch_size: int = 64) -> List[PredictionRecord]:
    """Inference-mode predictions, one record per example in dataset order."""
    records: List[PredictionRecord] = []
    with ad.no_grad():
        for batch in dataset.iter_batches(batch_size):
            p = forward(model, batch).p_class1
            records.extend(PredictionRecord(float(pi), int(yi)) for pi, yi in zip(p, batch.labels))
    return records


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_accuracy: Optional[float] = None
    eval_ece: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "eval_accuracy": self.eval_accuracy,
            "eval_ece": self.eval_ece,
        }


@dataclass
class TrainingHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    optimizer_steps: int = 0

    @property
    def final_loss(self) -> Optional[float]:
        return self.epochs[-1].train_loss if self.epochs else None


def train(
    model: FusionClassifier,
    train_data: EncodedDataset,
    config: TrainConfig,
    eval_data: Optional[EncodedDataset] = None,
    ece_config: Optional[EceConfig] = None,
    log_path: Optional[Path] = None,
) -> TrainingHistory:
    """Train `model` in place.

    With log_path set, one JSON line per epoch is appended:
    {epoch, train_loss, eval_accuracy, eval_ece}. epochs=0 leaves the model
    untouched and writes nothing.
    """
    rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng(config.seed + 1) if model.config.encoder.dropout_rate > 0 else None
    state = OptimizerState()
    history = TrainingHistory()

    log_file = None
    if log_path is not None and config.epochs > 0:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a")
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(train_data))
            losses, sizes = [], []
            for batch in train_data.iter_batches(config.batch_size, order):
                losses.append(train_step(model, batch, state, config, rng=dropout_rng) * len(batch))
                sizes.append(len(batch))
            record = EpochRecord(epoch=epoch, train_loss=math.fsum(losses) / max(1, sum(sizes)))

            if eval_data is not None and len(eval_data):
                records = evaluate(model, eval_data)
                record.eval_accuracy = confusion_and_threshold_metrics(records).accuracy
                record.eval_ece = ece(records, ece_config).ece

            history.epochs.append(record)
            logger.info(
                "epoch %d/%d loss=%.5f eval_accuracy=%s eval_ece=%s",
                epoch, config.epochs, record.train_loss, record.eval_accuracy, record.eval_ece,
            )
            if log_file is not None:
                log_file.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()

    history.optimizer_steps = state.step
    return history
