"""Slow reference implementations used as test oracles."""

from fractions import Fraction

import numpy as np


def aucpr_exact(scores, labels) -> Fraction:
    """Sum of recall increments times precision, one threshold per distinct score, in exact arithmetic."""
    pairs = list(zip(scores, labels))
    total_pos = sum(1 for _, y in pairs if y == 1)
    area = Fraction(0)
    prev_recall = Fraction(0)
    for t in sorted(set(scores), reverse=True):
        chosen = [y for s, y in pairs if s >= t]
        tp = sum(chosen)
        recall = Fraction(tp, total_pos)
        area += (recall - prev_recall) * Fraction(tp, len(chosen))
        prev_recall = recall
    return area


def central_difference(f, theta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += eps
        down[i] -= eps
        g[i] = (f(up) - f(down)) / (2 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))
