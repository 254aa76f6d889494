from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


@dataclass
class TrainSpec:
    """Hyperparameters shared by every trainable model.

    ``epochs`` doubles as the number of boosting rounds for GBDT.
    """

    epochs: int = 10
    learning_rate: float = 0.01
    batch_size: int = 256
    seed: int = 0
    sample_weights: Optional[np.ndarray] = None
    l2: float = 0.0
    max_depth: int = 4
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    hidden: tuple[int, ...] = (32, 16)

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        if self.l2 < 0 or self.reg_lambda < 0 or self.min_child_weight < 0:
            raise ValueError("regularizers must be >= 0")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")


@dataclass
class SGDState:
    """Optimizer state carried across calls (the federated rounds resume it)."""

    lr: float
    epochs_done: int = 0
    losses: list[float] = field(default_factory=list)


# objective(theta, rows) -> (loss, grad); rows=None means the full dataset
Objective = Callable[[np.ndarray, Optional[np.ndarray], bool], tuple[float, Optional[np.ndarray]]]


def minibatch_sgd(
    theta: np.ndarray,
    objective: Objective,
    n_rows: int,
    spec: TrainSpec,
    state: SGDState | None = None,
    stream: int = 0,
) -> tuple[np.ndarray, SGDState]:
    """Plain mini-batch SGD with a halving line search on the epoch loss.

    An epoch whose end-of-epoch full loss exceeds the previous one is rolled
    back and the learning rate halved, so accepted losses never increase.
    Shuffles are keyed on ``(seed, stream, global epoch)``; resuming with the
    returned state continues the exact trajectory of one long call.
    """
    state = state if state is not None else SGDState(spec.learning_rate)
    theta = theta.copy()
    loss, _ = objective(theta, None, False)
    for _ in range(spec.epochs):
        order = np.random.default_rng([spec.seed, stream, state.epochs_done]).permutation(n_rows)
        cand = theta.copy()
        for start in range(0, n_rows, spec.batch_size):
            _, g = objective(cand, order[start:start + spec.batch_size], True)
            cand -= state.lr * g
        new_loss, _ = objective(cand, None, False)
        if np.isfinite(new_loss) and new_loss <= loss:
            theta, loss = cand, new_loss
        else:
            state.lr *= 0.5
        state.epochs_done += 1
        state.losses.append(float(loss))
    return theta, state


def normalized_weights(weights: np.ndarray | None, n: int) -> np.ndarray:
    """Scale sample weights to mean one so batch losses keep their usual magnitude."""
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"expected {n} sample weights, got shape {w.shape}")
    if np.any(w < 0) or not np.isfinite(w).all():
        raise ValueError("sample weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("sample weights sum to zero")
    return w * (n / total)
