"""
Metric kernels for the downstream protocols and the report container they fill.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

Counts = Tuple[int, int, int]

RATE_METRICS = ("acc_all", "acc_in", "acc_out", "recall_out", "micro_f1", "macro_f1")


@dataclass
class F1Result:
    micro_f1: float
    macro_f1: float
    degenerate: bool = False
    per_label: List[float] = field(default_factory=list)


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def label_f1(tp: int, fp: int, fn: int) -> float:
    """F1 from precision and recall, with 0/0 taken as 0 at every step"""
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    return _safe_div(2 * precision * recall, precision + recall)


def f1_metrics(counts: Union[Sequence[Counts], Mapping[str, Counts]]) -> F1Result:
    """
    Micro F1 pools the counts over labels; macro F1 averages per-label F1, where
    a label that never occurs and is never predicted contributes 0.
    """
    values = list(counts.values()) if isinstance(counts, Mapping) else list(counts)
    for tp, fp, fn in values:
        if min(tp, fp, fn) < 0:
            raise DataError(f"negative confusion count in ({tp}, {fp}, {fn})")
    if not values:
        return F1Result(0.0, 0.0, degenerate=True)

    per_label = [label_f1(*c) for c in values]
    tp, fp, fn = (int(sum(c[i] for c in values)) for i in range(3))
    degenerate = tp + fp + fn == 0
    if degenerate:
        logger.warning("⚠️ F1 requested on all-zero counts; reporting 0")
    return F1Result(label_f1(tp, fp, fn), float(np.mean(per_label)), degenerate, per_label)


def multilabel_counts(y_true: np.ndarray, y_pred: np.ndarray) -> List[Counts]:
    """Per-label (TP, FP, FN) from n x num_labels binary matrices"""
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    if y_true.shape != y_pred.shape:
        raise DataError(f"label matrices differ in shape: {y_true.shape} vs {y_pred.shape}")
    tp = (y_true & y_pred).sum(axis=0)
    fp = (~y_true & y_pred).sum(axis=0)
    fn = (y_true & ~y_pred).sum(axis=0)
    return [(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)]


def intent_metrics(y_true: Sequence[str], y_pred: Sequence[str], out_label: str = "out") -> Dict[str, Optional[float]]:
    """
    acc_all: exact-match accuracy over every example
    acc_in: accuracy over in-domain examples
    acc_out: in/out detection accuracy over every example
    recall_out: share of out-of-domain examples predicted as out
    Out-of-domain metrics are None when the set has no out-of-domain examples.
    """
    if len(y_true) != len(y_pred):
        raise DataError(f"{len(y_true)} labels for {len(y_pred)} predictions")
    if not y_true:
        raise DataError("intent metrics need at least one example")
    truth = np.asarray(y_true, dtype=object)
    pred = np.asarray(y_pred, dtype=object)
    correct = truth == pred
    is_out = truth == out_label
    pred_out = pred == out_label

    return {
        "acc_all": float(correct.mean()),
        "acc_in": float(correct[~is_out].mean()) if (~is_out).any() else None,
        "acc_out": float((is_out == pred_out).mean()) if is_out.any() else None,
        "recall_out": float(pred_out[is_out].mean()) if is_out.any() else None,
    }


def rank_of_truth(scores: Sequence[float], truth_index: int) -> int:
    """1-based rank; equal scores are ordered by candidate index"""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= truth_index < scores.size:
        raise DataError(f"truth index {truth_index} outside {scores.size} candidates")
    truth = scores[truth_index]
    ahead = np.sum(scores > truth) + np.sum(scores[:truth_index] == truth)
    return int(ahead) + 1


def k_to_100(ranks: Sequence[int], k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise DataError("k-to-100 needs at least one ranked example")
    return float(np.mean(ranks <= k))


@dataclass
class MetricsReport:
    task: str
    metrics: Dict[str, Optional[float]]
    metadata: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.metrics.items():
            is_rate = name in RATE_METRICS or "_to_" in name
            if is_rate and value is not None and not 0.0 <= value <= 1.0:
                raise DataError(f"metric {name}={value} is not a rate in [0, 1]")

    def to_dict(self) -> dict:
        return {"task": self.task, "metrics": dict(self.metrics), "metadata": dict(self.metadata)}

    def save_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True, default=str)
        return path

    def save_csv(self, path) -> Path:
        """One row per metric; absent metrics are written as empty cells"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["task", "metric", "value"])
            for name, value in self.metrics.items():
                writer.writerow([self.task, name, "" if value is None else repr(float(value))])
        return path
