#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Dataset ingestion and preparation for the fusion experiments.

Covers whitespace tokenization against a small vocabulary, z-score
standardization of the auxiliary structural features, stratified
train/test splitting, the synthetic text x aux interaction task, and the
comma-delimited dataset file format.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import DataValidationError

logger = logging.getLogger(__name__)

PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIAL_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3

FILLER_PREFIX = "w"
MARKER_PREFIX = "mk"


# ---------------------------------------------------------------------------
# Vocabulary and tokenization
# ---------------------------------------------------------------------------

def split_text(text: str) -> List[str]:
    """Lowercase whitespace tokenizer."""
    return text.lower().split()


@dataclass
class Vocabulary:
    """Token string -> id map; ids 0-3 are PAD, UNK, CLS, SEP."""

    token_to_id: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {token: i for i, token in enumerate(SPECIAL_TOKENS)}
        for i, token in enumerate(SPECIAL_TOKENS):
            if self.token_to_id.get(token) != i:
                raise DataValidationError(f"Vocabulary must map {token} to id {i}")

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        """Build from an ordered token list (specials are prepended when absent)."""
        mapping = {token: i for i, token in enumerate(SPECIAL_TOKENS)}
        for token in tokens:
            if token not in mapping:
                mapping[token] = len(mapping)
        return cls(mapping)

    @classmethod
    def build(cls, texts: Sequence[str], max_size: Optional[int] = None) -> "Vocabulary":
        """Frequency-ordered vocabulary (ties broken alphabetically) from training texts."""
        counts = Counter(token for text in texts for token in split_text(text))
        ordered = sorted(counts, key=lambda tok: (-counts[tok], tok))
        if max_size is not None:
            ordered = ordered[: max(0, max_size - len(SPECIAL_TOKENS))]
        return cls.from_tokens(ordered)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def tokens(self) -> List[str]:
        return [tok for tok, _ in sorted(self.token_to_id.items(), key=lambda item: item[1])]


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> Tuple[List[int], List[int]]:
    """CLS + head-truncated content + SEP, padded to exactly `max_len`.

    Returns (token ids, attention mask) with mask 1 on non-PAD positions.
    """
    if max_len < 2:
        raise DataValidationError(f"max_len must be at least 2, got {max_len}")
    content = [vocab.lookup(tok) for tok in split_text(text)][: max_len - 2]
    ids = [CLS_ID] + content + [SEP_ID]
    mask = [1] * len(ids)
    padding = max_len - len(ids)
    return ids + [PAD_ID] * padding, mask + [0] * padding


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Column-oriented labelled examples: raw text, aux features, binary labels."""

    texts: List[str]
    aux: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.texts = list(self.texts)
        self.aux = np.asarray(self.aux, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.aux.ndim != 2:
            raise DataValidationError(f"aux must be 2-D (examples x d_struct), got shape {self.aux.shape}")
        n = len(self.texts)
        if self.aux.shape[0] != n or self.labels.shape != (n,):
            raise DataValidationError(
                f"column lengths differ: texts={n} aux={self.aux.shape[0]} labels={self.labels.shape[0]}"
            )
        if not np.all(np.isfinite(self.aux)):
            raise DataValidationError("aux features contain non-finite values")
        if n and not np.all(np.isin(self.labels, (0, 1))):
            raise DataValidationError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.texts)

    @property
    def d_struct(self) -> int:
        return int(self.aux.shape[1])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset([self.texts[i] for i in idx], self.aux[idx], self.labels[idx])

    def class_counts(self) -> Dict[int, int]:
        return {int(c): int((self.labels == c).sum()) for c in (0, 1)}


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------

@dataclass
class StandardizerStats:
    """Per-column mean and population std fitted on the training split."""

    means: np.ndarray
    stds: np.ndarray

    def to_dict(self) -> Dict[str, List[float]]:
        return {"means": [float(v) for v in self.means], "stds": [float(v) for v in self.stds]}

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> "StandardizerStats":
        try:
            means = np.asarray(data["means"], dtype=np.float64)
            stds = np.asarray(data["stds"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataValidationError(f"Malformed standardizer stats: {exc}") from exc
        if means.shape != stds.shape or means.ndim != 1:
            raise DataValidationError("Standardizer means and stds must be equal-length lists")
        return cls(means, stds)

    def save(self, path: Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path: Path) -> "StandardizerStats":
        with open(path, "r") as f:
            return cls.from_dict(json.load(f))


def fit_standardizer(train_aux) -> StandardizerStats:
    """Fit z-score statistics; constant columns get std 1."""
    aux = np.asarray(train_aux, dtype=np.float64)
    if aux.ndim != 2 or aux.shape[0] == 0:
        raise DataValidationError("Cannot fit standardizer on an empty training set")
    if aux.shape[0] < 2:
        raise DataValidationError("Standardizer needs at least 2 training examples")
    means = aux.mean(axis=0)
    stds = aux.std(axis=0)
    constant = stds <= 1e-12
    if np.any(constant):
        logger.info("Constant aux columns %s standardized with divisor 1", np.flatnonzero(constant).tolist())
    stds = np.where(constant, 1.0, stds)
    return StandardizerStats(means, stds)


def apply_standardizer(stats: StandardizerStats, aux) -> np.ndarray:
    values = np.asarray(aux, dtype=np.float64)
    if values.shape[-1] != stats.means.shape[0]:
        raise DataValidationError(
            f"aux width {values.shape[-1]} does not match standardizer width {stats.means.shape[0]}"
        )
    return (values - stats.means) / stats.stds


# ---------------------------------------------------------------------------
# Stratified split
# ---------------------------------------------------------------------------

class SplitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    seed: int = 0


def stratified_split_indices(labels, config: SplitConfig) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    train_parts, test_parts = [], []
    # Both binary classes must be present; an absent class counts as 0 examples.
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        if members.size < 2:
            raise DataValidationError(f"class {int(cls)} has {members.size} example(s); at least 2 required")
        n_test = int(np.floor(members.size * config.test_fraction + 0.5))
        n_test = min(max(n_test, 1), members.size - 1)
        shuffled = rng.permutation(members)
        test_parts.append(shuffled[:n_test])
        train_parts.append(shuffled[n_test:])
    train_idx = rng.permutation(np.concatenate(train_parts))
    test_idx = rng.permutation(np.concatenate(test_parts))
    return train_idx, test_idx


def stratified_split(dataset: Dataset, config: SplitConfig) -> Tuple[Dataset, Dataset]:
    """Per-class shuffled split; test gets round(count x fraction) of each class."""
    if len(dataset) == 0:
        raise DataValidationError("Cannot split an empty dataset")
    train_idx, test_idx = stratified_split_indices(dataset.labels, config)
    return dataset.subset(train_idx), dataset.subset(test_idx)


# ---------------------------------------------------------------------------
# Synthetic interaction task
# ---------------------------------------------------------------------------

class SyntheticTaskConfig(BaseModel):
    """Text x aux interaction task.

    The clean label is balanced. A hidden bit `a` is 1 with probability
    strength/2 and is encoded by the sign of aux_0; the text carries marker
    tokens iff `t = clean_label XOR a`. Labels are then flipped with
    probability `noise_rate`. Remaining aux columns are standard-normal
    distractors.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_examples: int = Field(2000, ge=4)
    vocab_size: int = Field(24, ge=2)
    seq_len: int = Field(10, ge=1)
    d_struct: int = Field(4, ge=1)
    interaction_strength: float = Field(0.5, ge=0.0, le=1.0)
    noise_rate: float = Field(0.02, ge=0.0, lt=0.5)
    n_marker_types: int = Field(2, ge=1)
    markers_per_text: int = Field(2, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check_sizes(self) -> "SyntheticTaskConfig":
        if self.n_marker_types >= self.vocab_size:
            raise ValueError("vocab_size must exceed n_marker_types (at least one filler token)")
        if self.markers_per_text > self.seq_len:
            raise ValueError("markers_per_text cannot exceed seq_len")
        return self


def bayes_accuracy(config: SyntheticTaskConfig) -> Dict[str, float]:
    """Closed-form Bayes-optimal accuracies of the synthetic task.

    joint: text and aux together recover the clean label, so only label
    noise is irreducible. text_only: predicting y = t is right whenever
    a = 0 and the label survived, or a = 1 and it was flipped. aux_only:
    the clean label is independent of `a`, so aux carries no signal.
    """
    p_a = config.interaction_strength / 2.0
    eta = config.noise_rate
    agree = (1.0 - p_a) * (1.0 - eta) + p_a * eta
    return {
        "joint": 1.0 - eta,
        "text_only": max(agree, 1.0 - agree),
        "aux_only": 0.5,
    }


def generate_synthetic(config: SyntheticTaskConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    n = config.n_examples
    n_pos = n // 2
    clean = rng.permutation(np.array([0] * (n - n_pos) + [1] * n_pos, dtype=np.int64))
    hidden = (rng.random(n) < config.interaction_strength / 2.0).astype(np.int64)
    has_marker = clean ^ hidden
    flips = (rng.random(n) < config.noise_rate).astype(np.int64)
    labels = clean ^ flips

    n_fillers = config.vocab_size - config.n_marker_types
    texts: List[str] = []
    for i in range(n):
        tokens = [f"{FILLER_PREFIX}{k}" for k in rng.integers(0, n_fillers, size=config.seq_len)]
        if has_marker[i]:
            positions = rng.choice(config.seq_len, size=config.markers_per_text, replace=False)
            for pos in positions:
                tokens[pos] = f"{MARKER_PREFIX}{int(rng.integers(0, config.n_marker_types))}"
        texts.append(" ".join(tokens))

    aux = rng.normal(0.0, 1.0, size=(n, config.d_struct))
    aux[:, 0] = (2 * hidden - 1) * rng.uniform(0.5, 1.5, size=n)
    logger.info("Generated %d synthetic examples (bayes=%s)", n, bayes_accuracy(config))
    return Dataset(texts, aux, labels)


# ---------------------------------------------------------------------------
# Dataset file format
# ---------------------------------------------------------------------------

def _header(d_struct: int) -> List[str]:
    return ["text"] + [f"aux_{i}" for i in range(d_struct)] + ["label"]


def _quote(text: str) -> str:
    return '"' + text.replace('"', '""') + '"'


def write_dataset(dataset: Dataset, path: Path) -> Path:
    """Write `text,aux_0..aux_{d-1},label`; text always double-quoted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(_header(dataset.d_struct)) + "\n")
        for text, aux, label in zip(dataset.texts, dataset.aux, dataset.labels):
            values = ",".join(repr(float(v)) for v in aux)
            f.write(f"{_quote(text)},{values},{int(label)}\n")
    return path


def read_dataset(path: Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"Dataset file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        d_struct = len(header) - 2
        if d_struct < 1 or header != _header(d_struct):
            raise DataValidationError(f"{path}: header must be {','.join(_header(max(d_struct, 1)))}")
        texts, aux_rows, labels = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataValidationError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                aux_rows.append([float(v) for v in row[1:-1]])
                label = int(row[-1])
            except ValueError as exc:
                raise DataValidationError(f"{path}:{line_no}: {exc}") from exc
            if label not in (0, 1):
                raise DataValidationError(f"{path}:{line_no}: label must be 0 or 1, got {label}")
            texts.append(row[0])
            labels.append(label)
    aux = np.asarray(aux_rows, dtype=np.float64).reshape(len(texts), d_struct)
    return Dataset(texts, aux, np.asarray(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# Model-ready encoding
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    token_ids: np.ndarray
    mask: np.ndarray
    aux: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])


@dataclass
class EncodedDataset:
    """Tokenized ids, masks, standardized aux and labels as aligned arrays."""

    token_ids: np.ndarray
    mask: np.ndarray
    aux: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def d_struct(self) -> int:
        return int(self.aux.shape[1])

    def batch(self, indices: Sequence[int]) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.token_ids[idx], self.mask[idx], self.aux[idx], self.labels[idx])

    def iter_batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[Batch]:
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start:start + batch_size])


def encode_dataset(
    dataset: Dataset,
    vocab: Vocabulary,
    max_len: int,
    stats: Optional[StandardizerStats] = None,
) -> EncodedDataset:
    ids, masks = [], []
    for text in dataset.texts:
        token_ids, mask = tokenize(text, vocab, max_len)
        ids.append(token_ids)
        masks.append(mask)
    aux = apply_standardizer(stats, dataset.aux) if stats is not None else dataset.aux.copy()
    return EncodedDataset(
        token_ids=np.asarray(ids, dtype=np.int64).reshape(len(dataset), max_len),
        mask=np.asarray(masks, dtype=bool).reshape(len(dataset), max_len),
        aux=aux,
        labels=dataset.labels.copy(),
    )
