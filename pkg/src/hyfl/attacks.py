"""Privacy attacks against the protocol's three exposure points.

* gradient inversion against an account client's autoencoder update,
* membership and attribute inference against the transaction classifier,
* a leakage probe that tries to recover account flags from embeddings.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import N_FLAGS
from .metrics import roc_auc
from .models import Autoencoder, Classifier, TrainSpec, classifier_predict, classifier_train
from .models.classifiers import default_spec, dense_input_grad
from .privacy import NoiseSpec, add_gaussian_noise


@dataclass
class AttackReport:
    kind: str
    metrics: dict[str, float]
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self) -> None:
        for name, val in self.metrics.items():
            if not np.isfinite(val):
                raise ValueError(f"metric {name} is not finite")
            if name.endswith("cos") and not -1.0 - 1e-9 <= val <= 1.0 + 1e-9:
                raise ValueError(f"{name}={val} outside [-1, 1]")
            if (name.endswith("auc") or name.endswith("accuracy")) and not 0.0 <= val <= 1.0:
                raise ValueError(f"{name}={val} outside [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# gradient inversion


@dataclass
class InversionProblem:
    model: Autoencoder
    target_grad: np.ndarray
    batch_size: int = 1
    steps: int = 2000
    step_size: float = 0.03
    seed: int = 0
    prior_weight: float = 0.0
    x_init: np.ndarray | None = None
    restart_patience: int = 200  # restart from a fresh random point after this many steps without progress; 0 disables


@dataclass
class InversionResult:
    x: np.ndarray
    trace: np.ndarray  # best cosine seen up to each step
    objective: float


def _layers(model: Autoencoder):
    layers = []
    for net in (model.encoder, model.decoder):
        for W, b, act in zip(net.weights, net.biases, net.activations):
            if act not in ("relu", "linear"):
                raise ValueError("inversion supports relu/linear layers only")
            layers.append((W, b, act))
    return layers


def grad_and_jacobian(model: Autoencoder, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Parameter gradient of the reconstruction loss at ``X`` and its Jacobian w.r.t. ``X``.

    The Jacobian comes from pushing one tangent per input coordinate through
    both the forward and the backward pass (ReLU has zero curvature almost
    everywhere, so only the activation masks are needed).
    Returns ``g`` of shape ``(P,)`` and ``J`` of shape ``(P, B*d)``.
    """
    B, d = X.shape
    K = B * d
    V = np.eye(K).reshape(K, B, d)
    layers = _layers(model)
    acts, tans, masks = [X], [V], []
    for W, b, act in layers:
        z = acts[-1] @ W + b
        tz = tans[-1] @ W
        m = (z > 0) if act == "relu" else np.ones_like(z, dtype=bool)
        masks.append(m)
        acts.append(z * m)
        tans.append(tz * m)
    delta = 2.0 * (acts[-1] - X)
    tdelta = 2.0 * (tans[-1] - V)
    g_parts, j_parts = [], []
    for i in reversed(range(len(masks))):
        W = layers[i][0]
        delta = delta * masks[i]
        tdelta = tdelta * masks[i]
        a_prev, t_prev = acts[i], tans[i]
        gW = a_prev.T @ delta
        tgW = np.einsum("kbi,bj->kij", t_prev, delta) + np.einsum("bi,kbj->kij", a_prev, tdelta)
        g_parts.append((gW.ravel(), delta.sum(axis=0)))
        j_parts.append((tgW.reshape(K, -1), tdelta.sum(axis=1)))
        delta = delta @ W.T
        tdelta = tdelta @ W.T
    g = np.concatenate([np.concatenate(p) for p in reversed(g_parts)])
    J = np.concatenate([np.concatenate(p, axis=1) for p in reversed(j_parts)], axis=1)
    return g, J.T


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def gradient_inversion(problem: InversionProblem) -> InversionResult:
    """Search for inputs whose loss gradient points the same way as the observed one.

    Adam ascent on ``cos(grad(x), g*) - prior_weight * ||x||^2``. When the
    cosine stalls for ``restart_patience`` steps the search restarts from a
    fresh seeded point; the step budget is shared across restarts.
    """
    model = problem.model
    g_star = np.asarray(problem.target_grad, dtype=float)
    if g_star.shape != (model.n_params,):
        raise ValueError(f"target gradient must have {model.n_params} entries")
    if not np.isfinite(g_star).all():
        raise ValueError("target gradient is not finite")
    gs_norm = np.linalg.norm(g_star)
    if gs_norm == 0:
        raise ValueError("target gradient is zero")
    shape = (problem.batch_size, model.in_dim)
    rng = np.random.default_rng(problem.seed)
    if problem.x_init is not None:
        x = np.array(problem.x_init, dtype=float).reshape(shape)
    else:
        x = rng.uniform(0.0, 1.0, size=shape)

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros(x.size)
    v = np.zeros(x.size)
    best_x, best = x.copy(), -np.inf
    run_best, since = -np.inf, 0
    trace = np.empty(problem.steps + 1)
    tau = 0
    for t in range(problem.steps + 1):
        g, J = grad_and_jacobian(model, x)
        gn = np.linalg.norm(g)
        cos = float(g @ g_star / (gn * gs_norm)) if gn > 0 else 0.0
        if not np.isfinite(cos):
            raise ValueError("inversion objective became non-finite")
        if cos > best:
            best, best_x = cos, x.copy()
        trace[t] = best
        if t == problem.steps or best >= 1.0:
            trace[t:] = best
            break
        if cos > run_best + 1e-4:
            run_best, since = cos, 0
        else:
            since += 1
        if problem.restart_patience and since >= problem.restart_patience:
            x = rng.normal(0.0, 1.0, size=shape)
            m[:] = 0.0
            v[:] = 0.0
            run_best, since, tau = -np.inf, 0, 0
            continue
        if gn > 0:
            d_cos = g_star / (gn * gs_norm) - cos * g / (gn * gn)
            ascent = d_cos @ J
        else:
            ascent = np.zeros(x.size)
        ascent = ascent - 2.0 * problem.prior_weight * x.ravel()
        m = beta1 * m + (1 - beta1) * ascent
        v = beta2 * v + (1 - beta2) * ascent * ascent
        tau += 1
        m_hat = m / (1 - beta1 ** tau)
        v_hat = v / (1 - beta2 ** tau)
        x = x + (problem.step_size * m_hat / (np.sqrt(v_hat) + eps)).reshape(shape)
    return InversionResult(best_x, np.clip(trace, -1.0, 1.0), float(np.clip(best, -1.0, 1.0)))


def input_cosine(x: np.ndarray, x_true: np.ndarray) -> float:
    return _cosine(np.ravel(x), np.ravel(x_true))


# ---------------------------------------------------------------------------
# membership inference

ScoreFn = Callable[[np.ndarray], np.ndarray]


def _score_fn(target) -> ScoreFn:
    if isinstance(target, Classifier):
        return lambda X: np.asarray(classifier_predict(target, X), dtype=float)
    return target


def membership_features(scores: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-record attack features from the model's output: confidence in the true label, its log-loss, the label."""
    p = np.clip(scores, 1e-12, 1 - 1e-12)
    p_true = np.where(y == 1, p, 1 - p)
    return np.column_stack([p_true, -np.log(p_true), y.astype(float)])


@dataclass
class ShadowSpec:
    kind: str = "mlp"
    train: TrainSpec | None = None
    noise_variance: float = 0.0
    n_shadows: int = 1


def membership_inference(
    target: Classifier | ScoreFn,
    attacker_X: np.ndarray,
    attacker_y: np.ndarray,
    members: tuple[np.ndarray, np.ndarray],
    nonmembers: tuple[np.ndarray, np.ndarray],
    shadow: ShadowSpec | None = None,
    seed: int = 0,
) -> AttackReport:
    """Shadow-model membership attack; reports the attack AUC on the real target.

    Each shadow model is trained on half of the attacker's data (the other
    half being its non-members), mimicking the target's training recipe.
    """
    shadow = shadow or ShadowSpec()
    attacker_y = np.asarray(attacker_y)
    counts = np.bincount(attacker_y.astype(np.int64), minlength=2)
    if counts.min() < 4:
        raise ValueError("attacker data needs at least 4 rows per class for the shadow split")
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for s in range(shadow.n_shadows):
        idx = rng.permutation(len(attacker_y))
        inside, outside = [], []
        for cls in (0, 1):
            rows = idx[attacker_y[idx] == cls]
            half = len(rows) // 2
            inside.append(rows[:half])
            outside.append(rows[half:2 * half])
        inside = np.sort(np.concatenate(inside))
        outside = np.sort(np.concatenate(outside))
        spec = shadow.train or default_spec(shadow.kind)
        Xs = add_gaussian_noise(attacker_X[inside], NoiseSpec(shadow.noise_variance, seed * 1000 + s))
        model = classifier_train(Xs, attacker_y[inside], None, shadow.kind, spec)
        for rows, member in ((inside, 1), (outside, 0)):
            scores = np.asarray(classifier_predict(model, attacker_X[rows]), dtype=float)
            feats.append(membership_features(scores, attacker_y[rows]))
            labels.append(np.full(len(rows), member))
    F = np.concatenate(feats)
    L = np.concatenate(labels)
    mu, sd = F.mean(axis=0), F.std(axis=0)
    sd[sd == 0] = 1.0
    attack = classifier_train((F - mu) / sd, L, None, "logreg", TrainSpec(epochs=30, learning_rate=0.1, seed=seed))

    score = _score_fn(target)
    Xm, ym = members
    Xn, yn = nonmembers
    Ft = np.concatenate([membership_features(score(Xm), np.asarray(ym)),
                         membership_features(score(Xn), np.asarray(yn))])
    truth = np.concatenate([np.ones(len(ym)), np.zeros(len(yn))])
    pred = np.asarray(classifier_predict(attack, (Ft - mu) / sd), dtype=float)
    auc = roc_auc(pred, truth)
    return AttackReport("membership", {"auc": auc},
                        {"shadow_kind": shadow.kind, "n_shadows": shadow.n_shadows,
                         "shadow_noise_variance": shadow.noise_variance,
                         "n_members": int(len(ym)), "n_nonmembers": int(len(yn))}, seed)


# ---------------------------------------------------------------------------
# attribute inference


@dataclass
class AttributeResult:
    row: np.ndarray
    loss: float


def _row_loss(model, x: np.ndarray, label) -> float:
    if isinstance(model, Autoencoder):
        r = model.reconstruct(x[None, :])[0] - x
        return float(r @ r)
    p = float(np.clip(classifier_predict(model, x), 1e-12, 1 - 1e-12))
    if model.kind == "svm":
        margin = float(model.margin(x[None, :])[0])
        return max(0.0, 1.0 - (2.0 * label - 1.0) * margin)
    return -np.log(p) if label == 1 else -np.log(1 - p)


def _row_grad(model, x: np.ndarray, label) -> np.ndarray:
    if isinstance(model, Autoencoder):
        X = x[None, :]
        z = model.encoder.forward(X, keep=True)
        out = model.decoder.forward(z, keep=True)
        resid = out - X
        _, _, dz = model.decoder.backward(2.0 * resid)
        _, _, dx = model.encoder.backward(dz)
        return (dx - 2.0 * resid)[0]
    _, dX = dense_input_grad(model.params, x[None, :], np.array([float(label)]), model.kind)
    return dX[0]


def attribute_inference(
    model: Classifier | Autoencoder,
    row: np.ndarray,
    missing: list[int] | np.ndarray,
    label: int | None = None,
    steps: int = 200,
    step_size: float = 0.5,
    bounds: tuple[float, float] = (-5.0, 5.0),
    grid: np.ndarray | None = None,
) -> AttributeResult:
    """Fill in ``missing`` coordinates of ``row`` by minimizing the model's loss.

    Differentiable targets use projected, normalized gradient descent with a
    decaying step; GBDT targets fall back to coordinate-wise grid search.
    Known coordinates are never written.
    """
    x0 = np.array(row, dtype=float)
    miss = np.unique(np.asarray(missing, dtype=np.int64))
    if miss.size == 0:
        return AttributeResult(x0, _row_loss(model, x0, label))
    if miss.min() < 0 or miss.max() >= x0.size:
        raise ValueError("missing index out of range")
    if not isinstance(model, Autoencoder) and label is None:
        raise ValueError("classifier targets need the record's label")
    lo, hi = bounds
    x = x0.copy()
    x[miss] = np.clip(x[miss], lo, hi)

    if isinstance(model, Classifier) and model.kind == "gbdt":
        values = np.linspace(lo, hi, 23) if grid is None else np.asarray(grid, dtype=float)
        best = _row_loss(model, x, label)
        for _ in range(2):
            for j in miss:
                for val in values:
                    cand = x.copy()
                    cand[j] = val
                    loss = _row_loss(model, cand, label)
                    if loss < best:
                        best, x = loss, cand
        return AttributeResult(x, best)

    best_x, best = x.copy(), _row_loss(model, x, label)
    for t in range(steps):
        g = _row_grad(model, x, label)[miss]
        gn = np.linalg.norm(g)
        if gn == 0:
            break
        x[miss] = np.clip(x[miss] - step_size / np.sqrt(1 + t) * g / gn, lo, hi)
        loss = _row_loss(model, x, label)
        if loss < best:
            best, best_x = loss, x.copy()
    return AttributeResult(best_x, best)


# ---------------------------------------------------------------------------
# feature leakage


def feature_leakage_probe(
    embeddings: np.ndarray,
    flags: np.ndarray,
    aux_size: int = 200,
    method: str = "knn",
    k: int = 5,
    seed: int = 0,
) -> AttackReport:
    """How well can someone holding embeddings plus a few labelled accounts recover flags?

    The first ``aux_size`` rows of a seeded permutation are the attacker's
    labelled set; accuracy is measured on the rest.
    """
    E = np.asarray(embeddings, dtype=float)
    f = np.asarray(flags, dtype=np.int64)
    if len(E) != len(f):
        raise ValueError("embeddings and flags differ in length")
    n_classes = np.unique(f).size
    if aux_size < n_classes:
        raise ValueError(f"auxiliary set of {aux_size} is smaller than the {n_classes} flag classes present")
    if aux_size >= len(f):
        raise ValueError("no rows left to evaluate")
    perm = np.random.default_rng(seed).permutation(len(f))
    aux, test = perm[:aux_size], perm[aux_size:]
    mu, sd = E[aux].mean(axis=0), E[aux].std(axis=0)
    sd[sd == 0] = 1.0
    Z = (E - mu) / sd
    if method == "knn":
        pred = _knn_predict(Z[aux], f[aux], Z[test], k)
    elif method == "softmax":
        pred = _softmax_predict(Z[aux], f[aux], Z[test], seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    acc = float(np.mean(pred == f[test]))
    majority = float(np.mean(f[test] == np.bincount(f[aux]).argmax()))
    return AttackReport("leakage", {"accuracy": acc, "chance_accuracy": 1.0 / N_FLAGS,
                                    "majority_accuracy": majority},
                        {"method": method, "k": k, "aux_size": aux_size, "n_eval": int(test.size)}, seed)


def _knn_predict(A: np.ndarray, labels: np.ndarray, Q: np.ndarray, k: int) -> np.ndarray:
    k = min(k, len(A))
    out = np.empty(len(Q), dtype=np.int64)
    for s in range(0, len(Q), 1024):
        q = Q[s:s + 1024]
        d2 = (q * q).sum(1)[:, None] - 2 * q @ A.T + (A * A).sum(1)[None, :]
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        votes = labels[nn]
        for i, v in enumerate(votes):
            c = np.bincount(v, minlength=N_FLAGS)
            # ties go to the nearest neighbour among the tied classes
            tied = np.flatnonzero(c == c.max())
            out[s + i] = next(x for x in v if x in tied)
    return out


def _softmax_predict(A, labels, Q, seed, epochs=200, lr=0.5) -> np.ndarray:
    n, d = A.shape
    W = np.zeros((d + 1, N_FLAGS))
    Ab = np.column_stack([A, np.ones(n)])
    Y = np.eye(N_FLAGS)[labels]
    for _ in range(epochs):
        logits = Ab @ W
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        W -= lr * Ab.T @ (P - Y) / n
    return np.argmax(np.column_stack([Q, np.ones(len(Q))]) @ W, axis=1)
