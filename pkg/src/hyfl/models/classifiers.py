"""Transaction-side classifiers sharing one ``[0, 1]`` score contract."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Union

import numpy as np

from .dense import DenseParams, flatten_grads, sigmoid
from .gbdt import GBDT, Tree, train_gbdt
from .training import SGDState, TrainSpec, minibatch_sgd, normalized_weights

KINDS = ("gbdt", "logreg", "svm", "mlp")
SVM_CALIBRATION = 2.0

DEFAULT_SPECS = {
    "gbdt": TrainSpec(epochs=50, learning_rate=0.3, max_depth=4, reg_lambda=1.0),
    "logreg": TrainSpec(epochs=10, learning_rate=0.1, batch_size=256),
    "svm": TrainSpec(epochs=10, learning_rate=0.01, batch_size=256, l2=1e-4),
    "mlp": TrainSpec(epochs=20, learning_rate=0.1, batch_size=256, hidden=(32, 16)),
}


def default_spec(kind: str, **overrides) -> TrainSpec:
    if kind not in DEFAULT_SPECS:
        raise ValueError(f"unknown classifier kind {kind!r}")
    return replace(DEFAULT_SPECS[kind], **overrides)


@dataclass
class Classifier:
    kind: str
    params: Union[GBDT, DenseParams]
    train_state: SGDState | None = None

    @property
    def n_features(self) -> int:
        if isinstance(self.params, GBDT):
            return self.params.n_features
        return self.params.in_dim

    def margin(self, X: np.ndarray) -> np.ndarray:
        if isinstance(self.params, GBDT):
            return self.params.margin(X)
        return self.params.forward(X)[:, 0]

    def to_json(self) -> dict:
        doc = {"format": "hyfl-model", "version": 1, "kind": self.kind, "dims": {"n_features": self.n_features}}
        if isinstance(self.params, GBDT):
            doc["base_score"] = self.params.base_score
            doc["trees"] = [t.to_json() for t in self.params.trees]
        else:
            doc["network"] = self.params.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Classifier":
        if doc.get("format") != "hyfl-model" or doc.get("version") != 1:
            raise ValueError("unsupported model document")
        kind = doc["kind"]
        if kind == "gbdt":
            params = GBDT(doc["dims"]["n_features"], [Tree.from_json(t) for t in doc["trees"]], doc["base_score"])
        elif kind in KINDS:
            params = DenseParams.from_json(doc["network"])
        else:
            raise ValueError(f"unknown classifier kind {kind!r}")
        return cls(kind, params)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def save_model(model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_json(), sort_keys=True, indent=1), encoding="utf-8")


def load_model(path: str | Path):
    from .autoencoder import Autoencoder

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("kind") == "autoencoder":
        return Autoencoder.from_json(doc)
    return Classifier.from_json(doc)


# ---------------------------------------------------------------------------
# losses over a dense "network" whose single output is the logit / margin


def dense_loss_grad(net: DenseParams, X, y, w, kind: str, l2: float = 0.0, need_grad: bool = True):
    """Weighted mean loss ``sum(w*l) / len(X)`` of the margin network and its flat gradient.

    ``w`` is expected to be pre-normalized (mean one over the full training set).
    """
    z = net.forward(X, keep=need_grad)[:, 0]
    n = len(X)
    if kind == "svm":
        s = 2.0 * y - 1.0
        slack = 1.0 - s * z
        ell = np.maximum(slack, 0.0)
        dz = np.where(slack > 0, -s, 0.0)
    else:
        ell = np.logaddexp(0.0, z) - y * z
        dz = sigmoid(z) - y
    loss = float((w * ell).sum() / n)
    reg = 0.5 * l2 * sum(float((W * W).sum()) for W in net.weights)
    if not need_grad:
        return loss + reg, None
    gW, gb, _ = net.backward((w * dz / n)[:, None])
    if l2:
        gW = [g + l2 * W for g, W in zip(gW, net.weights)]
    return loss + reg, flatten_grads(gW, gb)


def dense_input_grad(net: DenseParams, X, y, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss and its gradient w.r.t. the inputs (used by attribute inference)."""
    z = net.forward(X, keep=True)[:, 0]
    if kind == "svm":
        s = 2.0 * y - 1.0
        slack = 1.0 - s * z
        ell = np.maximum(slack, 0.0)
        dz = np.where(slack > 0, -s, 0.0)
    else:
        ell = np.logaddexp(0.0, z) - y * z
        dz = sigmoid(z) - y
    _, _, dX = net.backward(dz[:, None])
    return ell, dX


def _init_network(kind: str, d: int, spec: TrainSpec) -> DenseParams:
    if kind == "mlp":
        sizes = [d, *spec.hidden, 1]
        acts = ["relu"] * len(spec.hidden) + ["linear"]
        return DenseParams.init(sizes, acts, np.random.default_rng([spec.seed, 7]))
    return DenseParams([np.zeros((d, 1))], [np.zeros(1)], ["linear"])


def classifier_train(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None,
    kind: str,
    spec: TrainSpec | None = None,
) -> Classifier:
    """Fit one of the classifier kinds; ``weights`` scale each row's loss."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if kind not in KINDS:
        raise ValueError(f"unknown classifier kind {kind!r}")
    spec = spec or default_spec(kind)
    spec.validate()
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if np.isnan(X).any():
        raise ValueError("NaN features")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    if y.min() == y.max():
        raise ValueError("training labels contain a single class")
    if weights is None:
        weights = spec.sample_weights

    if kind == "gbdt":
        w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != y.shape or (w < 0).any():
            raise ValueError("invalid sample weights")
        model = train_gbdt(X, y, w, spec.epochs, spec.learning_rate, spec.max_depth,
                           spec.reg_lambda, spec.min_child_weight)
        return Classifier(kind, model)

    w = normalized_weights(weights, len(y))
    net = _init_network(kind, X.shape[1], spec)

    def objective(theta, rows, need_grad):
        net.set_vector(theta)
        if rows is None:
            return dense_loss_grad(net, X, y, w, kind, spec.l2, need_grad)
        return dense_loss_grad(net, X[rows], y[rows], w[rows], kind, spec.l2, need_grad)

    theta, state = minibatch_sgd(net.to_vector(), objective, len(y), spec)
    net.set_vector(theta)
    net.cache = []
    return Classifier(kind, net, state)


def classifier_predict(model: Classifier, x: np.ndarray) -> np.ndarray | float:
    """Score(s) in ``[0, 1]``; accepts a single row or a matrix."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.n_features:
        raise ValueError(f"input dim {X.shape[1]} != model dim {model.n_features}")
    m = model.margin(X)
    if model.kind == "svm":
        m = SVM_CALIBRATION * m
    s = sigmoid(m)
    return float(s[0]) if single else s
