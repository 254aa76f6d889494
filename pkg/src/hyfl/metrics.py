"""Ranking and threshold metrics for imbalanced binary detection."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    n_pos = int((y == 1).sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("need at least one positive and one negative label")
    return s, y


def aucpr(scores, labels) -> float:
    """Area under the precision-recall curve, ``sum_k (R_k - R_{k-1}) P_k``.

    One threshold per distinct score (descending); tied scores enter together.
    """
    s, y = _check(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_tie = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_tie]
    predicted = (np.arange(1, y.size + 1))[last_of_tie]
    precision = tp / predicted
    recall = tp / tp[-1]
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.clip((d_recall * precision).sum(), 0.0, 1.0))


def prf1(scores, labels, threshold: float = 0.5) -> tuple[float, float, float]:
    """Precision, recall and F1 of ``score >= threshold``; empty denominators give 0."""
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int((pred & (y == 1)).sum())
    fp = int((pred & (y == 0)).sum())
    fn = int((~pred & (y == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def roc_auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney statistic (ties count one half)."""
    s, y = _check(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
