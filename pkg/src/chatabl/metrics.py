"""Binary classification metrics; the positive class is "equation correct"."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(predicted, truth) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN)."""
    p = np.asarray(predicted, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    return tp, fp, fn, tn


def compute_metrics(predicted, truth) -> Metrics:
    tp, fp, fn, tn = confusion(predicted, truth)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return Metrics((tp + tn) / (tp + fp + fn + tn), precision, recall, f1)


def auc(scores, truth) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=bool)
    if s.shape != t.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {t.shape}")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s)  # average ranks on ties
    return float((ranks[t].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def full_metrics(predicted, scores, truth) -> Metrics:
    m = compute_metrics(predicted, truth)
    t = np.asarray(truth, dtype=bool)
    value = auc(scores, t) if 0 < t.sum() < t.size else float("nan")
    return Metrics(m.accuracy, m.precision, m.recall, m.f1, value)
