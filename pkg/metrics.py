#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Discrimination and calibration metrics over (probability of class 1, label) records.

Threshold metrics predict class 1 when p > threshold (argmax of [1-p, p],
ties to class 0). ECE bins confidence max(p, 1-p) into equal-width bins
over [0, 1], right-closed with the first bin also left-closed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import rankdata

from errors import MetricInputError

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["accuracy", "macro_f1", "mcc", "brier", "log_loss", "ece", "roc_auc", "average_precision"]


@dataclass(frozen=True)
class PredictionRecord:
    p: float
    y: int

    def __post_init__(self):
        if not (math.isfinite(self.p) and 0.0 <= self.p <= 1.0):
            raise MetricInputError(f"probability must be finite and in [0, 1], got {self.p!r}")
        if self.y not in (0, 1):
            raise MetricInputError(f"label must be 0 or 1, got {self.y!r}")


def records_from_arrays(p: Sequence[float], y: Sequence[int]) -> List[PredictionRecord]:
    return [PredictionRecord(float(pi), int(yi)) for pi, yi in zip(p, y)]


def _arrays(records: Sequence[PredictionRecord]) -> Tuple[np.ndarray, np.ndarray]:
    if len(records) == 0:
        raise MetricInputError("metric requires at least one record")
    p = np.fromiter((r.p for r in records), dtype=np.float64, count=len(records))
    y = np.fromiter((r.y for r in records), dtype=np.int64, count=len(records))
    return p, y


def predicted_class(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(p) > threshold).astype(np.int64)


# ---------------------------------------------------------------------------
# Threshold metrics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionCounts:
    """Class 1 is the positive class."""

    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


@dataclass
class ThresholdMetrics:
    confusion: ConfusionCounts
    accuracy: float
    macro_f1: float
    mcc: float
    warnings: List[str] = field(default_factory=list)


def _f1(hits: int, false_pos: int, false_neg: int) -> Optional[float]:
    denom = 2 * hits + false_pos + false_neg
    return None if denom == 0 else 2 * hits / denom


def threshold_metrics_from_counts(counts: ConfusionCounts) -> ThresholdMetrics:
    """Accuracy, macro F1 and MCC from a 2x2 confusion matrix.

    Degenerate denominators yield 0 and add a warning.
    """
    if counts.total <= 0:
        raise MetricInputError("confusion counts are empty")
    warnings: List[str] = []
    accuracy = (counts.tp + counts.tn) / counts.total

    f1_pos = _f1(counts.tp, counts.fp, counts.fn)
    f1_neg = _f1(counts.tn, counts.fn, counts.fp)
    if f1_pos is None:
        warnings.append("f1 undefined for class 1 (no positives predicted or present); scored 0")
    if f1_neg is None:
        warnings.append("f1 undefined for class 0 (no negatives predicted or present); scored 0")
    macro_f1 = ((f1_pos or 0.0) + (f1_neg or 0.0)) / 2

    product = (counts.tp + counts.fp) * (counts.tp + counts.fn) * (counts.tn + counts.fp) * (counts.tn + counts.fn)
    if product == 0:
        warnings.append("mcc denominator is zero (a row or column of the confusion matrix is empty); scored 0")
        mcc = 0.0
    else:
        mcc = (counts.tp * counts.tn - counts.fp * counts.fn) / math.sqrt(product)
    for message in warnings:
        logger.warning(message)
    return ThresholdMetrics(counts, accuracy, macro_f1, mcc, warnings)


def confusion_counts(records: Sequence[PredictionRecord], threshold: float = 0.5) -> ConfusionCounts:
    p, y = _arrays(records)
    pred = predicted_class(p, threshold)
    return ConfusionCounts(
        tp=int(((pred == 1) & (y == 1)).sum()),
        tn=int(((pred == 0) & (y == 0)).sum()),
        fp=int(((pred == 1) & (y == 0)).sum()),
        fn=int(((pred == 0) & (y == 1)).sum()),
    )


def confusion_and_threshold_metrics(records: Sequence[PredictionRecord], threshold: float = 0.5) -> ThresholdMetrics:
    return threshold_metrics_from_counts(confusion_counts(records, threshold))


def records_from_counts(counts: ConfusionCounts, confident: float = 0.9) -> List[PredictionRecord]:
    """Records that realize exactly `counts` at threshold 0.5."""
    low = 1.0 - confident
    return (
        [PredictionRecord(confident, 1)] * counts.tp
        + [PredictionRecord(low, 0)] * counts.tn
        + [PredictionRecord(confident, 0)] * counts.fp
        + [PredictionRecord(low, 1)] * counts.fn
    )


# ---------------------------------------------------------------------------
# Probabilistic scores
# ---------------------------------------------------------------------------

def brier(records: Sequence[PredictionRecord]) -> float:
    p, y = _arrays(records)
    return float(np.mean((p - y) ** 2))


def log_loss(records: Sequence[PredictionRecord], clip_epsilon: float = 1e-15) -> float:
    """Mean negative log probability of the true class, clipped to [eps, 1 - eps]."""
    p, y = _arrays(records)
    true_class = np.where(y == 1, p, 1.0 - p)
    return float(-np.mean(np.log(np.clip(true_class, clip_epsilon, 1.0 - clip_epsilon))))


class EceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_bins: int = Field(10, ge=1)
    scheme: Literal["equal_width"] = "equal_width"


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_confidence: Optional[float]
    accuracy: Optional[float]


@dataclass
class EceResult:
    ece: float
    bins: List[ReliabilityBin]


def bin_edges(n_bins: int) -> List[float]:
    return [i / n_bins for i in range(n_bins + 1)]


def ece(records: Sequence[PredictionRecord], config: Optional[EceConfig] = None) -> EceResult:
    """Expected calibration error over confidence bins, plus the reliability bins.

    Sums use math.fsum, so the value does not depend on record order.
    """
    config = config or EceConfig()
    p, y = _arrays(records)
    n = len(p)
    confidence = np.maximum(p, 1.0 - p)
    correct = (predicted_class(p) == y).astype(np.float64)
    edges = bin_edges(config.n_bins)
    assignment = np.clip(np.searchsorted(np.asarray(edges), confidence, side="left") - 1, 0, config.n_bins - 1)

    bins: List[ReliabilityBin] = []
    terms: List[float] = []
    for b in range(config.n_bins):
        members = assignment == b
        count = int(members.sum())
        if count == 0:
            bins.append(ReliabilityBin(edges[b], edges[b + 1], 0, None, None))
            continue
        mean_conf = math.fsum(confidence[members]) / count
        accuracy = math.fsum(correct[members]) / count
        terms.append((count / n) * abs(accuracy - mean_conf))
        bins.append(ReliabilityBin(edges[b], edges[b + 1], count, mean_conf, accuracy))
    return EceResult(ece=math.fsum(terms), bins=bins)


# ---------------------------------------------------------------------------
# Ranking metrics and curves
# ---------------------------------------------------------------------------

def _require_both_classes(y: np.ndarray) -> Tuple[int, int]:
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricInputError("ranking metrics need both classes present")
    return n_pos, n_neg


def roc_auc(records: Sequence[PredictionRecord]) -> float:
    """Rank-sum (Mann-Whitney) AUC; tied scores use average ranks, i.e. count 1/2."""
    p, y = _arrays(records)
    n_pos, n_neg = _require_both_classes(y)
    ranks = rankdata(p, method="average")
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _threshold_groups(p: np.ndarray, y: np.ndarray):
    """Distinct thresholds (descending) with cumulative TP/FP counts at each."""
    order = np.argsort(-p, kind="mergesort")
    p_sorted, y_sorted = p[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(p_sorted)), len(p_sorted) - 1]
    tps = np.cumsum(y_sorted)[last]
    fps = (last + 1) - tps
    return p_sorted[last], tps, fps


def average_precision(records: Sequence[PredictionRecord]) -> float:
    """Sum over thresholds of (recall increment) x precision."""
    p, y = _arrays(records)
    n_pos, _ = _require_both_classes(y)
    _, tps, fps = _threshold_groups(p, y)
    precision = tps / (tps + fps)
    recall = tps / n_pos
    increments = np.diff(np.r_[0.0, recall])
    return float(math.fsum(increments * precision))


@dataclass
class CurvePoints:
    roc: List[Tuple[float, float, float]]
    pr: List[Tuple[float, float, float]]


def curve_points(records: Sequence[PredictionRecord]) -> CurvePoints:
    """ROC (threshold, fpr, tpr) and PR (threshold, recall, precision) by descending threshold.

    A score counts as positive at threshold t when p >= t; ROC starts at (inf, 0, 0).
    """
    p, y = _arrays(records)
    n_pos, n_neg = _require_both_classes(y)
    thresholds, tps, fps = _threshold_groups(p, y)
    roc = [(math.inf, 0.0, 0.0)] + [
        (float(t), float(fp / n_neg), float(tp / n_pos)) for t, tp, fp in zip(thresholds, tps, fps)
    ]
    pr = [(float(t), float(tp / n_pos), float(tp / (tp + fp))) for t, tp, fp in zip(thresholds, tps, fps)]
    return CurvePoints(roc=roc, pr=pr)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    n_records: int
    threshold: float
    n_bins: int
    accuracy: float
    macro_f1: float
    mcc: float
    brier: float
    log_loss: float
    ece: float
    roc_auc: Optional[float]
    average_precision: Optional[float]
    confusion: ConfusionCounts
    reliability: List[ReliabilityBin]
    warnings: List[str] = field(default_factory=list)
    gate_summary: Optional[Dict[str, object]] = None

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data["confusion"] = self.confusion.to_dict()
        data["reliability"] = [asdict(b) for b in self.reliability]
        if self.gate_summary is None:
            data.pop("gate_summary")
        return data

    def table_row(self) -> Dict[str, Optional[float]]:
        return {column: getattr(self, column) for column in TABLE_COLUMNS}


def report(
    records: Sequence[PredictionRecord],
    ece_config: Optional[EceConfig] = None,
    threshold: float = 0.5,
) -> MetricsReport:
    """Every metric at one threshold. Single-class record sets leave the ranking metrics None with a warning."""
    ece_config = ece_config or EceConfig()
    thresholded = confusion_and_threshold_metrics(records, threshold)
    calibration = ece(records, ece_config)
    warnings = list(thresholded.warnings)
    try:
        auc, ap = roc_auc(records), average_precision(records)
    except MetricInputError as exc:
        warnings.append(f"roc_auc/average_precision undefined: {exc}")
        auc = ap = None
    return MetricsReport(
        n_records=len(records),
        threshold=threshold,
        n_bins=ece_config.n_bins,
        accuracy=thresholded.accuracy,
        macro_f1=thresholded.macro_f1,
        mcc=thresholded.mcc,
        brier=brier(records),
        log_loss=log_loss(records),
        ece=calibration.ece,
        roc_auc=auc,
        average_precision=ap,
        confusion=thresholded.confusion,
        reliability=calibration.bins,
        warnings=warnings,
    )


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def export_report(
    metrics: MetricsReport,
    records: Sequence[PredictionRecord],
    out_dir: Path,
) -> Dict[str, str]:
    """Write report.json, reliability.csv, confusion.csv and (when defined) roc/pr curve files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: Dict[str, str] = {}

    report_path = out_dir / "report.json"
    with open(report_path, "w") as f:
        json.dump(metrics.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    written["report"] = str(report_path)

    written["reliability"] = str(_write_rows(
        out_dir / "reliability.csv",
        ["bin_lo", "bin_hi", "count", "mean_confidence", "accuracy"],
        ([_fmt(b.lo), _fmt(b.hi), b.count, _fmt(b.mean_confidence), _fmt(b.accuracy)] for b in metrics.reliability),
    ))

    c = metrics.confusion
    written["confusion"] = str(_write_rows(
        out_dir / "confusion.csv",
        ["actual", "predicted_0", "predicted_1"],
        [[0, c.tn, c.fp], [1, c.fn, c.tp]],
    ))

    if metrics.roc_auc is not None:
        curves = curve_points(records)
        written["roc_curve"] = str(_write_rows(
            out_dir / "roc_curve.csv", ["threshold", "fpr", "tpr"],
            ([_fmt(t), _fmt(fpr), _fmt(tpr)] for t, fpr, tpr in curves.roc),
        ))
        written["pr_curve"] = str(_write_rows(
            out_dir / "pr_curve.csv", ["threshold", "recall", "precision"],
            ([_fmt(t), _fmt(r), _fmt(prec)] for t, r, prec in curves.pr),
        ))
    return written


def relative_change(candidate: Optional[float], reference: Optional[float]) -> Optional[float]:
    """(candidate - reference) / |reference|; None when undefined."""
    if candidate is None or reference is None or reference == 0:
        return None
    return (candidate - reference) / abs(reference)
