#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Experiment configuration: one validated object per run.

Config files are YAML or JSON. Command-line overrides are written into the
raw mapping by dotted path before validation, so a run is validated as a
whole before any work starts.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from data_pipeline import SplitConfig, SyntheticTaskConfig
from errors import ConfigValidationError
from metrics import EceConfig
from models import ModelConfig
from training import TrainConfig


class DataSource(BaseModel):
    """Either a dataset file or a synthetic task; defaults to the synthetic task."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    path: Optional[str] = None
    synthetic: Optional[SyntheticTaskConfig] = None

    @model_validator(mode="after")
    def _one_source(self) -> "DataSource":
        if self.path is not None and self.synthetic is not None:
            raise ValueError("set either data.path or data.synthetic, not both")
        return self

    @property
    def task(self) -> SyntheticTaskConfig:
        return self.synthetic or SyntheticTaskConfig()


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    data: DataSource = Field(default_factory=DataSource)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    ece: EceConfig = Field(default_factory=EceConfig)
    output_dir: str = "runs/default"


def _format_errors(exc: ValidationError, prefix: str = "") -> List[Tuple[str, str]]:
    problems = []
    for err in exc.errors():
        path = ".".join(str(part) for part in err["loc"] if part != "__root__")
        if prefix:
            path = f"{prefix}.{path}" if path else prefix
        problems.append((path or "<root>", err["msg"]))
    return problems


def load_config_file(path: Path) -> Dict[str, Any]:
    """Read a YAML or JSON mapping; a missing or malformed file is a config error."""
    path = Path(path)
    if not path.exists():
        raise ConfigValidationError([(str(path), "config file not found")])
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigValidationError([(str(path), f"unparseable config: {exc}")]) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigValidationError([(str(path), "top level must be a mapping")])
    return data


def set_path(data: Dict[str, Any], dotted: str, value: Any) -> None:
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if not isinstance(child, dict):
            child = {}
            node[part] = child
        node = child
    node[parts[-1]] = value


def apply_overrides(raw: Mapping[str, Any], overrides: Iterable[Tuple[str, Any]]) -> Dict[str, Any]:
    """Copy of `raw` with each (dotted path, value) written in; None values are skipped."""
    data = copy.deepcopy(dict(raw))
    for dotted, value in overrides:
        if value is not None:
            set_path(data, dotted, value)
    return data


def validate_experiment(raw: Mapping[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigValidationError(_format_errors(exc)) from exc


def load_experiment(
    path: Optional[Path] = None,
    overrides: Iterable[Tuple[str, Any]] = (),
) -> ExperimentConfig:
    raw = load_config_file(path) if path is not None else {}
    return validate_experiment(apply_overrides(raw, overrides))


def dump_experiment(config: ExperimentConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.dump(config.model_dump(mode="json"), f, default_flow_style=False, sort_keys=False)
    return path
