#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Command-line surface for the fusion experiments.

    gen     write a synthetic dataset file
    train   split -> standardize -> train -> checkpoint
    eval    held-out metrics report for a checkpoint
    sweep   ISFL at several insertion layers plus baselines, one comparison table
    inspect checkpoint manifest summary

Exit codes: 0 success, 2 validation error, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from checkpoint_manager import CheckpointManager, load_checkpoint, read_manifest, save_checkpoint
from data_pipeline import (
    Dataset,
    EncodedDataset,
    StandardizerStats,
    Vocabulary,
    bayes_accuracy,
    encode_dataset,
    fit_standardizer,
    generate_synthetic,
    read_dataset,
    stratified_split,
    write_dataset,
)
from errors import (
    CheckpointError,
    ConfigValidationError,
    DataValidationError,
    IsflError,
    NonFiniteGradientError,
    NumericOverflowError,
)
from experiment_config import (
    ExperimentConfig,
    apply_overrides,
    dump_experiment,
    load_config_file,
    validate_experiment,
)
from metrics import TABLE_COLUMNS, MetricsReport, export_report, relative_change, report
from models import FusionClassifier, inspect_gates
from training import TrainingHistory, evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3

FUSION_FLAGS = {"none": "none", "concat": "concat_head", "late_gate": "late_gate", "isfl": "isfl"}
GATE_MODE_FLAGS = {"single": "single_affine", "two_layer": "two_layer"}

CHECKPOINT_NAME = "model.ckpt"
TRAIN_LOG_NAME = "train_log.jsonl"
SWEEP_COLUMNS = (
    ["configuration", "fusion_mode", "insert_layer_index", "status"]
    + TABLE_COLUMNS
    + ["delta_accuracy_vs_none", "ece_relative_change_vs_concat_head", "error"]
)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    train: Dataset
    test: Dataset
    vocabulary: Vocabulary
    standardizer: StandardizerStats
    train_encoded: EncodedDataset
    test_encoded: EncodedDataset


def load_source(config: ExperimentConfig) -> Dataset:
    if config.data.path is not None:
        return read_dataset(Path(config.data.path))
    return generate_synthetic(config.data.task)


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """Split, then fit vocabulary and standardizer on the training part only."""
    train_set, test_set = stratified_split(load_source(config), config.split)
    vocab = Vocabulary.build(train_set.texts, max_size=config.model.encoder.vocab_size)
    stats = fit_standardizer(train_set.aux)
    max_len = config.model.encoder.max_len
    return PreparedData(
        train=train_set,
        test=test_set,
        vocabulary=vocab,
        standardizer=stats,
        train_encoded=encode_dataset(train_set, vocab, max_len, stats),
        test_encoded=encode_dataset(test_set, vocab, max_len, stats),
    )


@dataclass
class TrainingRun:
    model: FusionClassifier
    data: PreparedData
    history: TrainingHistory
    checkpoint_path: Path
    log_path: Path


def run_training(config: ExperimentConfig, out_dir: Optional[Path] = None) -> TrainingRun:
    out_dir = Path(out_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = prepare_data(config)
    model = FusionClassifier.initialize(config.model, data.train_encoded.d_struct, seed=config.train.seed)

    log_path = out_dir / TRAIN_LOG_NAME
    if log_path.exists():
        log_path.unlink()
    history = train(model, data.train_encoded, config.train, eval_data=data.test_encoded,
                    ece_config=config.ece, log_path=log_path)

    checkpoint_path = save_checkpoint(
        out_dir / CHECKPOINT_NAME, model, data.vocabulary, data.standardizer,
        experiment=config.model_dump(mode="json"),
    )
    data.standardizer.save(out_dir / "standardizer.json")
    dump_experiment(config, out_dir / "experiment.yaml")
    return TrainingRun(model, data, history, checkpoint_path, log_path)


def evaluation_report(model: FusionClassifier, test: EncodedDataset, config: ExperimentConfig) -> Tuple[MetricsReport, list]:
    records = evaluate(model, test)
    metrics = report(records, config.ece)
    gates = inspect_gates(model, test)
    if gates is not None:
        metrics.gate_summary = gates.to_dict()
    return metrics, records


@dataclass
class EvaluationRun:
    report: MetricsReport
    files: Dict[str, str]


def run_evaluation(
    checkpoint: Path,
    out_dir: Optional[Path] = None,
    data_path: Optional[str] = None,
    n_bins: Optional[int] = None,
) -> EvaluationRun:
    """Rebuild the held-out split recorded in the checkpoint and write the metrics files."""
    manifest = read_manifest(checkpoint)
    raw = manifest.get("experiment") or {}
    overrides = [("ece.n_bins", n_bins)]
    if data_path is not None:
        overrides.append(("data", {"path": str(data_path)}))
    config = validate_experiment(apply_overrides(raw, overrides))

    _, test_set = stratified_split(load_source(config), config.split)
    loaded = load_checkpoint(checkpoint, d_struct=test_set.d_struct)
    test = encode_dataset(test_set, loaded.vocabulary, loaded.model.config.encoder.max_len, loaded.standardizer)
    metrics, records = evaluation_report(loaded.model, test, config)
    files = export_report(metrics, records, Path(out_dir or config.output_dir))
    return EvaluationRun(metrics, files)


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

def sweep_plan(
    config: ExperimentConfig,
    layers: Sequence[int],
    with_late_gate: bool = False,
) -> List[Tuple[str, ExperimentConfig]]:
    """Every sweep configuration, validated up front.

    Baselines come first (none, concat_head, optionally late_gate), then one
    ISFL run per insertion layer. Any invalid layer fails the whole plan.
    """
    base = config.model_dump(mode="json")
    base_fusion = base["model"].get("fusion") or {}
    plan: List[Tuple[str, Dict[str, Any]]] = []
    for mode in ["none", "concat_head"] + (["late_gate"] if with_late_gate else []):
        raw = apply_overrides(base, [("model.fusion_mode", mode)])
        raw["model"]["fusion"] = None
        plan.append((mode, raw))
    for layer in layers:
        raw = apply_overrides(base, [("model.fusion_mode", "isfl")])
        raw["model"]["fusion"] = {**base_fusion, "insert_layer_index": int(layer)}
        plan.append((f"isfl@{layer}", raw))

    validated, problems = [], []
    for label, raw in plan:
        try:
            validated.append((label, validate_experiment(raw)))
        except ConfigValidationError as exc:
            problems.extend((f"{label}: {path}", msg) for path, msg in exc.problems)
    if problems:
        raise ConfigValidationError(problems)
    return validated


def _empty_row(label: str, config: ExperimentConfig) -> Dict[str, Any]:
    fusion = config.model.resolved_fusion
    row = {column: None for column in SWEEP_COLUMNS}
    row.update({
        "configuration": label,
        "fusion_mode": config.model.fusion_mode,
        "insert_layer_index": fusion.insert_layer_index if fusion is not None else None,
    })
    return row


def run_sweep_entry(label: str, config_data: Dict[str, Any], out_dir: str) -> Dict[str, Any]:
    """Train and evaluate one configuration in its own subdirectory; failures become a marked row."""
    config = ExperimentConfig.model_validate(config_data)
    row = _empty_row(label, config)
    run_dir = Path(out_dir) / label.replace("@", "_layer")
    try:
        run = run_training(config, run_dir)
        metrics, records = evaluation_report(run.model, run.data.test_encoded, config)
        export_report(metrics, records, run_dir)
        row.update(metrics.table_row())
        row["status"] = "ok"
        logger.info("sweep run %s: accuracy=%.4f ece=%.5f", label, metrics.accuracy, metrics.ece)
    except Exception as exc:
        _mark_failed(row, exc)
    return row


def _mark_failed(row: Dict[str, Any], exc: BaseException) -> Dict[str, Any]:
    row["status"] = "failed"
    row["error"] = f"{type(exc).__name__}: {exc}"
    logger.warning("sweep run %s failed: %s", row["configuration"], exc)
    return row


def add_baseline_deltas(rows: List[Dict[str, Any]]) -> None:
    by_label = {row["configuration"]: row for row in rows if row["status"] == "ok"}
    none_row, concat_row = by_label.get("none"), by_label.get("concat_head")
    for row in rows:
        if row["status"] != "ok":
            continue
        if none_row is not None:
            row["delta_accuracy_vs_none"] = row["accuracy"] - none_row["accuracy"]
        if concat_row is not None:
            row["ece_relative_change_vs_concat_head"] = relative_change(row["ece"], concat_row["ece"])


def write_sweep_table(rows: List[Dict[str, Any]], out_dir: Path) -> Dict[str, str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "sweep_table.csv", out_dir / "sweep_table.json"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    with open(json_path, "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"csv": str(csv_path), "json": str(json_path)}


@dataclass
class SweepRun:
    rows: List[Dict[str, Any]]
    files: Dict[str, str]


def run_sweep(
    config: ExperimentConfig,
    layers: Sequence[int],
    with_late_gate: bool = False,
    workers: int = 1,
    out_dir: Optional[Path] = None,
) -> SweepRun:
    out_dir = Path(out_dir or config.output_dir)
    plan = sweep_plan(config, layers, with_late_gate)
    jobs = [(label, cfg.model_dump(mode="json"), str(out_dir)) for label, cfg in plan]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_sweep_entry, *job) for job in jobs]
            rows = []
            for (label, cfg), future in zip(plan, futures):
                try:
                    rows.append(future.result())
                except Exception as exc:
                    rows.append(_mark_failed(_empty_row(label, cfg), exc))
    else:
        rows = [run_sweep_entry(*job) for job in jobs]
    add_baseline_deltas(rows)
    return SweepRun(rows, write_sweep_table(rows, out_dir))


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------

def config_overrides(args: argparse.Namespace) -> List[Tuple[str, Any]]:
    """Dotted-path overrides for every flag the user actually passed."""
    get = lambda name: getattr(args, name, None)
    overrides = [
        ("model.encoder.n_layers", get("layers")),
        ("model.encoder.d_model", get("d_model")),
        ("model.encoder.n_heads", get("heads")),
        ("model.encoder.max_len", get("max_len")),
        ("model.fusion.insert_layer_index", get("insert_layer")),
        ("model.fusion.gate_mode", GATE_MODE_FLAGS.get(get("gate_mode"))),
        ("train.epochs", get("epochs")),
        ("train.learning_rate", get("lr")),
        ("ece.n_bins", get("bins")),
    ]
    if get("fusion") is not None:
        overrides.append(("model.fusion_mode", FUSION_FLAGS[args.fusion]))
    if args.command == "gen":
        overrides += [("data.synthetic.n_examples", get("n")), ("data.synthetic.seed", get("seed"))]
    else:
        overrides += [("train.seed", get("seed")), ("output_dir", get("out"))]
        if get("data") is not None:
            overrides.append(("data", {"path": args.data}))
    return overrides


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    raw = load_config_file(Path(args.config)) if getattr(args, "config", None) else {}
    raw = apply_overrides(raw, config_overrides(args))
    model = raw.get("model") or {}
    explicit_fusion = getattr(args, "insert_layer", None) is not None or getattr(args, "gate_mode", None) is not None
    if model.get("fusion_mode", "isfl") != "isfl" and not explicit_fusion:
        model.pop("fusion", None)
    return validate_experiment(raw)


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML or JSON experiment config")
    parser.add_argument("--fusion", choices=sorted(FUSION_FLAGS), help="Fusion mode")
    parser.add_argument("--insert-layer", dest="insert_layer", type=int, help="ISFL insertion layer index")
    parser.add_argument("--gate-mode", dest="gate_mode", choices=sorted(GATE_MODE_FLAGS), help="ISFL gate network")
    parser.add_argument("--layers", type=int, help="Number of encoder blocks")
    parser.add_argument("--d-model", dest="d_model", type=int, help="Hidden width")
    parser.add_argument("--heads", type=int, help="Attention heads")
    parser.add_argument("--max-len", dest="max_len", type=int, help="Token sequence length incl. CLS/SEP")
    parser.add_argument("--epochs", type=int, help="Training epochs")
    parser.add_argument("--lr", type=float, help="Learning rate")
    parser.add_argument("--seed", type=int, help="Random seed")
    parser.add_argument("--bins", type=int, help="ECE bin count")
    parser.add_argument("--data", help="Dataset file (default: synthetic task)")
    parser.add_argument("--out", help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="ISFL fusion experiments")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen_parser = subparsers.add_parser("gen", help="Generate a synthetic dataset file")
    gen_parser.add_argument("--config", help="YAML or JSON experiment config")
    gen_parser.add_argument("--n", type=int, help="Number of examples")
    gen_parser.add_argument("--seed", type=int, help="Generator seed")
    gen_parser.add_argument("--out", required=True, help="Output dataset path")

    train_parser = subparsers.add_parser("train", help="Train a model and write a checkpoint")
    _add_common_flags(train_parser)

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint on its held-out split")
    eval_parser.add_argument("--checkpoint", required=True, help="Checkpoint file")
    eval_parser.add_argument("--data", help="Dataset file (default: the checkpoint's data source)")
    eval_parser.add_argument("--bins", type=int, help="ECE bin count")
    eval_parser.add_argument("--out", help="Report directory")

    sweep_parser = subparsers.add_parser("sweep", help="Compare ISFL insertion layers against baselines")
    _add_common_flags(sweep_parser)
    sweep_parser.add_argument("--insert-layers", dest="insert_layers", type=int, nargs="+", required=True,
                              help="Insertion layer indices to sweep")
    sweep_parser.add_argument("--workers", type=int, default=1, help="Parallel runs")
    sweep_parser.add_argument("--with-late-gate", dest="with_late_gate", action="store_true",
                              help="Add a late_gate baseline row")

    inspect_parser = subparsers.add_parser("inspect", help="Summarize a checkpoint")
    inspect_parser.add_argument("--checkpoint", required=True, help="Checkpoint file")
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    config = build_config(args)
    task = config.data.task
    path = write_dataset(generate_synthetic(task), Path(args.out))
    bayes = bayes_accuracy(task)
    print(f"✅ Wrote {task.n_examples} examples")
    print(f"📁 Dataset: {path}")
    print(f"📊 Bayes accuracy: joint {bayes['joint']:.4f}, text only {bayes['text_only']:.4f}, aux only {bayes['aux_only']:.4f}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = build_config(args)
    run = run_training(config)
    print(f"✅ Trained {config.model.fusion_mode} model ({run.history.optimizer_steps} steps)")
    print(f"📁 Checkpoint: {run.checkpoint_path}")
    print(f"📁 Training log: {run.log_path}")
    if run.history.epochs:
        last = run.history.epochs[-1]
        print(f"📊 Final epoch: loss {last.train_loss:.5f}, held-out accuracy {last.eval_accuracy}, ECE {last.eval_ece}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    result = run_evaluation(Path(args.checkpoint), out_dir=Path(args.out) if args.out else None,
                            data_path=args.data, n_bins=args.bins)
    m = result.report
    print(f"✅ Evaluated {m.n_records} held-out examples")
    print(f"📊 accuracy {m.accuracy:.4f}  macro F1 {m.macro_f1:.4f}  MCC {m.mcc:.4f}")
    print(f"📊 ECE {m.ece:.5f}  Brier {m.brier:.5f}  log loss {m.log_loss:.5f}  ROC-AUC {m.roc_auc}  AP {m.average_precision}")
    for warning in m.warnings:
        print(f"⚠️  {warning}")
    print(f"📁 Report: {result.files['report']}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = build_config(args)
    result = run_sweep(config, args.insert_layers, with_late_gate=args.with_late_gate, workers=args.workers)
    for row in result.rows:
        if row["status"] == "ok":
            print(f"✅ {row['configuration']}: accuracy {row['accuracy']:.4f}, ECE {row['ece']:.5f}")
        else:
            print(f"❌ {row['configuration']}: {row['error']}")
    print(f"📁 Table: {result.files['csv']}")
    return EXIT_OK if all(row["status"] == "ok" for row in result.rows) else EXIT_RUNTIME


def cmd_inspect(args: argparse.Namespace) -> int:
    result = CheckpointManager().describe(args.checkpoint)
    if not result["success"]:
        print(f"❌ {result['error']}")
        return EXIT_VALIDATION
    print(f"📋 {result['path']}")
    print(f"Fusion mode: {result['fusion_mode']}  insert layer: {result['insert_layer_index']}  layers: {result['n_layers']}")
    print(f"d_struct: {result['d_struct']}  values: {result['num_values']}  ISFL parameters: {'yes' if result['has_isfl'] else 'no'}")
    for name, shape in result["parameters"].items():
        print(f"  {name}: {tuple(shape)}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "inspect": cmd_inspect}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handler = COMMANDS.get(args.command)
    if handler is None:
        parser.print_help()
        return EXIT_VALIDATION

    try:
        return handler(args)
    except (ConfigValidationError, DataValidationError, CheckpointError) as exc:
        print(f"❌ {exc}")
        return EXIT_VALIDATION
    except (NumericOverflowError, NonFiniteGradientError, IsflError, ArithmeticError, OSError) as exc:
        print(f"❌ {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
