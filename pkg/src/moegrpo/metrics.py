"""Binary classification metrics: accuracy, F1 and rank-statistic ROC AUC."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


@dataclass
class EvalResult:
    accuracy: float
    f1: float
    roc_auc: Optional[float]
    tp: int
    fp: int
    tn: int
    fn: int
    f1_degenerate: bool = False
    auc_undefined: bool = False

    @property
    def n_samples(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(pred, true):
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"prediction/label shape mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("metrics need at least one sample")
    return pred, true


def confusion(pred, true, positive_class: int = 1):
    pred, true = _pair(pred, true)
    pp, tp_ = pred == positive_class, true == positive_class
    return (
        int(np.sum(pp & tp_)),
        int(np.sum(pp & ~tp_)),
        int(np.sum(~pp & ~tp_)),
        int(np.sum(~pp & tp_)),
    )


def accuracy(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.sum(pred == true)) / pred.size


def f1(pred, true, positive_class: int = 1) -> float:
    """Harmonic mean of precision and recall; 0 when either is undefined or both are 0."""
    tp, fp, _, fn = confusion(pred, true, positive_class)
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def roc_auc(scores, true) -> float:
    """Mann-Whitney AUC with average ranks for tied scores."""
    scores, true = _pair(scores, true)
    scores = scores.astype(np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("roc_auc: non-finite scores")
    pos = true == 1
    n_pos = int(pos.sum())
    n_neg = true.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc is undefined when only one class is present")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_arrays(pred, proba_pos, true) -> EvalResult:
    tp, fp, tn, fn = confusion(pred, true)
    try:
        auc, undefined = roc_auc(proba_pos, true), False
    except UndefinedMetricError:
        auc, undefined = None, True
    return EvalResult(
        accuracy=accuracy(pred, true),
        f1=f1(pred, true),
        roc_auc=auc,
        tp=tp, fp=fp, tn=tn, fn=fn,
        f1_degenerate=(tp + fp == 0 or tp + fn == 0),
        auc_undefined=undefined,
    )


def evaluate(model, X, y) -> EvalResult:
    """Argmax predictions for accuracy/F1, class-1 probability for AUC."""
    proba = model.predict_proba(X)
    return evaluate_arrays(np.argmax(proba, axis=1), proba[:, 1], np.asarray(y))
