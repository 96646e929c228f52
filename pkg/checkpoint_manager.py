#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Checkpoint Management for fusion classifiers.

A checkpoint is one file:
    8 bytes   little-endian uint64 manifest length
    N bytes   UTF-8 JSON manifest (format version, model config, d_struct,
              parameter names/shapes/offsets, vocabulary, standardizer)
    payload   raw little-endian float64 parameter values, in manifest order
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from data_pipeline import StandardizerStats, Vocabulary
from errors import CheckpointError, CheckpointMismatchError
from models import FusionClassifier, ModelConfig, expected_shapes

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CHECKPOINT_SUFFIX = ".ckpt"
_HEADER = struct.Struct("<Q")
_PAYLOAD_DTYPE = np.dtype("<f8")


@dataclass
class LoadedCheckpoint:
    model: FusionClassifier
    vocabulary: Vocabulary
    standardizer: Optional[StandardizerStats]
    manifest: Dict[str, Any]

    @property
    def experiment(self) -> Optional[Dict[str, Any]]:
        return self.manifest.get("experiment")


def save_checkpoint(
    path: Path,
    model: FusionClassifier,
    vocabulary: Vocabulary,
    standardizer: Optional[StandardizerStats] = None,
    experiment: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    entries, offset = [], 0
    for name, param in model.params.items():
        entries.append({"name": name, "shape": list(param.shape), "offset": offset, "count": int(param.size)})
        offset += int(param.size)

    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.model_dump(mode="json"),
        "d_struct": model.d_struct,
        "parameters": entries,
        "vocabulary": vocabulary.tokens(),
        "standardizer": standardizer.to_dict() if standardizer is not None else None,
        "experiment": experiment,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(len(header)))
        f.write(header)
        for _, param in model.params.items():
            f.write(np.ascontiguousarray(param.data, dtype=_PAYLOAD_DTYPE).tobytes())
    logger.info("Saved checkpoint %s (%d parameters)", path, len(entries))
    return path


def _read_parts(path: Path) -> Tuple[Dict[str, Any], bytes]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    (length,) = _HEADER.unpack_from(raw)
    end = _HEADER.size + length
    if end > len(raw):
        raise CheckpointError(f"{path}: manifest length {length} exceeds file size")
    try:
        manifest = json.loads(raw[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {manifest.get('format_version')!r}")
    return manifest, raw[end:]


def read_manifest(path: Path) -> Dict[str, Any]:
    return _read_parts(path)[0]


def compare_shapes(expected: Dict[str, Tuple[int, ...]], stored: Dict[str, Tuple[int, ...]]) -> List[str]:
    """Human-readable differences between two name -> shape maps (empty when equal)."""
    problems = []
    for name in sorted(set(expected) - set(stored)):
        problems.append(f"missing parameter {name} (expected shape {tuple(expected[name])})")
    for name in sorted(set(stored) - set(expected)):
        problems.append(f"unexpected parameter {name} with shape {tuple(stored[name])}")
    for name in sorted(set(expected) & set(stored)):
        if tuple(expected[name]) != tuple(stored[name]):
            problems.append(f"{name}: expected shape {tuple(expected[name])}, stored {tuple(stored[name])}")
    return problems


def load_checkpoint(path: Path, d_struct: Optional[int] = None) -> LoadedCheckpoint:
    """Rebuild the model, vocabulary and standardizer stored at `path`.

    With d_struct given, the stored parameters are checked against a model
    of that aux width and any difference raises CheckpointMismatchError.
    """
    manifest, payload = _read_parts(path)
    try:
        config = ModelConfig.model_validate(manifest["model_config"])
    except (KeyError, ValidationError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc

    try:
        stored_d_struct = int(manifest["d_struct"])
        layout = [(e["name"], tuple(e["shape"]), int(e["offset"]), int(e["count"])) for e in manifest["parameters"]]
        tokens = list(manifest["vocabulary"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: manifest is missing or has malformed d_struct/parameters/vocabulary: {exc!r}") from exc
    stored_shapes = {name: shape for name, shape, _, _ in layout}
    target = stored_d_struct if d_struct is None else d_struct
    problems = compare_shapes(expected_shapes(config, target), stored_shapes)
    if d_struct is not None and d_struct != stored_d_struct:
        problems.insert(0, f"data has d_struct {d_struct} but checkpoint was trained with d_struct {stored_d_struct}")
    if problems:
        raise CheckpointMismatchError(f"{path} does not match the model: " + "; ".join(problems))

    values = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE)
    total = sum(count for _, _, _, count in layout)
    if values.size != total:
        raise CheckpointError(f"{path}: payload holds {values.size} values, manifest declares {total}")
    arrays = {
        name: values[offset:offset + count].astype(np.float64).reshape(shape)
        for name, shape, offset, count in layout
    }
    model = FusionClassifier.initialize(config, stored_d_struct, seed=0)
    model.params.load_arrays(arrays)

    standardizer = manifest.get("standardizer")
    return LoadedCheckpoint(
        model=model,
        vocabulary=Vocabulary.from_tokens(tokens),
        standardizer=StandardizerStats.from_dict(standardizer) if standardizer is not None else None,
        manifest=manifest,
    )


class CheckpointManager:
    """Manages checkpoint files under a base directory for tool callers."""

    def __init__(self, base_dir: Optional[Path] = None):
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd() / "runs"

    def _resolve(self, name_or_path: str) -> Path:
        path = Path(name_or_path)
        if path.is_absolute() or path.exists():
            return path
        candidate = self.base_dir / path
        if candidate.suffix != CHECKPOINT_SUFFIX and not candidate.exists():
            candidate = candidate.with_name(candidate.name + CHECKPOINT_SUFFIX)
        return candidate

    def save(
        self,
        name: str,
        model: FusionClassifier,
        vocabulary: Vocabulary,
        standardizer: Optional[StandardizerStats] = None,
        experiment: Optional[Dict[str, Any]] = None,
    ) -> Dict[str, Any]:
        try:
            path = self._resolve(name)
            save_checkpoint(path, model, vocabulary, standardizer, experiment)
            return {"success": True, "path": str(path), "parameters": len(model.params)}
        except Exception as e:
            return {"success": False, "error": f"Failed to save checkpoint {name}: {e}"}

    def load(self, name: str, d_struct: Optional[int] = None) -> Dict[str, Any]:
        try:
            loaded = load_checkpoint(self._resolve(name), d_struct=d_struct)
            return {"success": True, "checkpoint": loaded}
        except CheckpointMismatchError as e:
            return {"success": False, "error": str(e), "suggestion": "Check d_struct and model flags against the checkpoint"}
        except Exception as e:
            return {"success": False, "error": f"Failed to load checkpoint {name}: {e}"}

    def describe(self, name: str) -> Dict[str, Any]:
        """Manifest summary: fusion mode, layer index, parameter shapes."""
        try:
            path = self._resolve(name)
            manifest = read_manifest(path)
            config = manifest["model_config"]
            model_config = ModelConfig.model_validate(config)
            fusion = model_config.resolved_fusion
            shapes = {e["name"]: e["shape"] for e in manifest["parameters"]}
            return {
                "success": True,
                "path": str(path),
                "fusion_mode": model_config.fusion_mode,
                "insert_layer_index": fusion.insert_layer_index if fusion is not None else None,
                "n_layers": model_config.encoder.n_layers,
                "d_struct": manifest["d_struct"],
                "has_isfl": any(n.startswith("isfl.") for n in shapes),
                "num_values": sum(int(e["count"]) for e in manifest["parameters"]),
                "parameters": shapes,
                "model_config": config,
            }
        except Exception as e:
            return {"success": False, "error": f"Failed to describe checkpoint {name}: {e}"}

    def list_checkpoints(self) -> Dict[str, Any]:
        try:
            if not self.base_dir.exists():
                return {"success": True, "checkpoints": [], "count": 0}
            found = []
            for path in sorted(self.base_dir.rglob(f"*{CHECKPOINT_SUFFIX}")):
                try:
                    manifest = read_manifest(path)
                    found.append({
                        "path": str(path),
                        "fusion_mode": manifest["model_config"].get("fusion_mode"),
                        "d_struct": manifest["d_struct"],
                    })
                except (CheckpointError, KeyError, AttributeError) as exc:
                    found.append({"path": str(path), "error": str(exc)})
            return {"success": True, "checkpoints": found, "count": len(found)}
        except Exception as e:
            return {"success": False, "error": f"Failed to list checkpoints: {e}"}
