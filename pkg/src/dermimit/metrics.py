"""Classification metrics (percent) and cross-validation aggregation."""

from __future__ import annotations

import logging
import math
from typing import Any, Dict, List, Sequence

import numpy as np

log = logging.getLogger(__name__)

METRICS = ("precision", "recall", "f1", "accuracy")


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _prf(tp: int, fp: int, fn: int):
    precision = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    recall = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _mean(values: List[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def multiclass_metrics(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> Dict[str, Any]:
    """Macro precision/recall/F1 over classes present in ``y_true``, plus top-1 accuracy."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    per_class = []
    excluded = []
    for c in range(n_classes):
        p, r, f = _prf(int(tp[c]), int(predicted[c] - tp[c]), int(support[c] - tp[c]))
        per_class.append({"class": c, "precision": p, "recall": r, "f1": f, "support": int(support[c])})
        if support[c] == 0:
            excluded.append(c)
    if excluded:
        log.warning("classes %s absent from split; excluded from macro averages", excluded)
    kept = [pc for pc in per_class if pc["support"] > 0]
    total = int(cm.sum())
    return {
        "precision": _mean([pc["precision"] for pc in kept]),
        "recall": _mean([pc["recall"] for pc in kept]),
        "f1": _mean([pc["f1"] for pc in kept]),
        "accuracy": 100.0 * int(tp.sum()) / total if total else 0.0,
        "per_class": per_class,
        "excluded": excluded,
        "confusion": cm.tolist(),
    }


def multilabel_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> Dict[str, Any]:
    """Per-label binary P/R/F1 macro-averaged over labels with positives, plus exact-match accuracy."""
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    tp = (y_true & y_pred).sum(axis=0)
    fp = (~y_true & y_pred).sum(axis=0)
    fn = (y_true & ~y_pred).sum(axis=0)
    per_label = []
    excluded = []
    for j in range(y_true.shape[1]):
        p, r, f = _prf(int(tp[j]), int(fp[j]), int(fn[j]))
        support = int(tp[j] + fn[j])
        per_label.append({"label": j, "precision": p, "recall": r, "f1": f, "support": support})
        if support == 0:
            excluded.append(j)
    if excluded:
        log.warning("labels %s have no positives in split; excluded from macro averages", excluded)
    kept = [pl for pl in per_label if pl["support"] > 0]
    n = y_true.shape[0]
    exact = int((y_true == y_pred).all(axis=1).sum())
    return {
        "precision": _mean([pl["precision"] for pl in kept]),
        "recall": _mean([pl["recall"] for pl in kept]),
        "f1": _mean([pl["f1"] for pl in kept]),
        "accuracy": 100.0 * exact / n if n else 0.0,
        "per_label": per_label,
        "excluded": excluded,
    }


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.1f}±{std:.1f}"


def aggregate(reports: Sequence[Dict[str, Dict[str, Any]]]) -> Dict[str, Dict[str, Dict[str, Any]]]:
    """Mean and sample standard deviation of each task metric across folds."""
    if not reports:
        return {}
    out: Dict[str, Dict[str, Dict[str, Any]]] = {}
    for task in reports[0]:
        out[task] = {}
        for metric in METRICS:
            values = [float(r[task][metric]) for r in reports]
            mean = sum(values) / len(values)
            var = sum((v - mean) ** 2 for v in values) / (len(values) - 1) if len(values) > 1 else 0.0
            std = math.sqrt(var)
            out[task][metric] = {
                "mean": mean, "std": std, "values": values, "text": format_mean_std(mean, std),
            }
    return out
