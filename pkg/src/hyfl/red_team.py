"""Attack experiments wired to the protocol's artefacts (updates, classifier, embeddings)."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .attacks import (
    AttackReport,
    InversionProblem,
    ShadowSpec,
    attribute_inference,
    feature_leakage_probe,
    gradient_inversion,
    input_cosine,
    membership_inference,
)
from .data import encode_flags
from .experiment import ExperimentConfig, prepare
from .models import Autoencoder, TrainSpec, ae_encode, ae_train_local, classifier_train
from .privacy import NoiseSpec, add_gaussian_noise, normalize_standard

# full-batch steps so the target reaches interpolation under the monotone-loss line search
MEMBERSHIP_SPEC = TrainSpec(epochs=1000, learning_rate=0.5, batch_size=4096, hidden=(64, 64))


def observed_update(model: Autoencoder, x: np.ndarray, learning_rate: float) -> np.ndarray:
    """Parameter change an account client holding the single record ``x`` would report after one local epoch."""
    spec = TrainSpec(epochs=1, learning_rate=learning_rate, batch_size=1)
    trained = ae_train_local(np.atleast_2d(x), model, spec)
    return trained.to_vector() - model.to_vector()


def run_inversion(cfg: ExperimentConfig, variances=(0.0, 0.1), samples: int = 5, steps: int = 2000,
                  on_gradient: bool = False) -> list[AttackReport]:
    """Invert single-record updates, optionally after adding Gaussian noise to the update.

    With ``on_gradient`` the noise is added to the raw loss gradient instead of
    the learning-rate-scaled update.
    """
    rng = np.random.default_rng([cfg.seed, 11])
    model = Autoencoder.init(seed=cfg.seed)
    flags = rng.integers(0, 12, size=samples)
    reports = []
    for var in variances:
        objs, coss = [], []
        for k, flag in enumerate(flags):
            x_true = encode_flags([flag])[0]
            delta = observed_update(model, x_true, cfg.ae_learning_rate)
            g_star = -delta / (cfg.ae_learning_rate if on_gradient else 1.0)
            noisy = add_gaussian_noise(g_star[None, :], NoiseSpec(var, cfg.seed * 100 + k))[0]
            res = gradient_inversion(InversionProblem(model, noisy, steps=steps, seed=cfg.seed * 100 + k))
            objs.append(res.objective)
            coss.append(input_cosine(res.x, x_true))
        reports.append(AttackReport("inversion", {"objective_cos": float(np.mean(objs)),
                                                  "input_cos": float(np.mean(coss))},
                                    {"noise_variance": var, "samples": samples, "steps": steps,
                                     "noise_on": "gradient" if on_gradient else "update"}, cfg.seed))
    return reports


def _normalized_pool(cfg: ExperimentConfig):
    pipe = prepare(replace(cfg, mode="centralized"))
    Z, _ = normalize_standard(pipe.train_matrix)
    return pipe, Z, pipe.train_labels


def _balanced(y: np.ndarray, per_class: int, rng, exclude=()) -> np.ndarray:
    taken = set(int(i) for i in exclude)
    out = []
    for cls in (0, 1):
        idx = np.array([i for i in np.flatnonzero(y == cls) if i not in taken])
        out.append(rng.choice(idx, size=min(per_class, idx.size), replace=False))
    return np.sort(np.concatenate(out))


def run_membership(cfg: ExperimentConfig, variances=(0.0, 0.1), per_class: int = 100,
                   spec: TrainSpec = MEMBERSHIP_SPEC, pool=None) -> list[AttackReport]:
    """Attack an MLP trained on a small member set, once per training-noise level."""
    if pool is None:
        _, Z, y = _normalized_pool(cfg)
    else:
        Z, y = pool
    rng = np.random.default_rng([cfg.seed, 13])
    members = _balanced(y, per_class, rng)
    nonmembers = _balanced(y, per_class, rng, members)
    attacker = _balanced(y, 2 * per_class, rng, np.concatenate([members, nonmembers]))
    spec = replace(spec, seed=cfg.seed)
    reports = []
    for var in variances:
        Xt = add_gaussian_noise(Z[members], NoiseSpec(var, cfg.seed))
        target = classifier_train(Xt, y[members], None, "mlp", spec)
        rep = membership_inference(target, Z[attacker], y[attacker], (Z[members], y[members]),
                                   (Z[nonmembers], y[nonmembers]),
                                   ShadowSpec("mlp", spec, noise_variance=var), seed=cfg.seed)
        rep.config["noise_variance"] = var
        reports.append(rep)
    return reports


def run_attribute(cfg: ExperimentConfig, column: int = 8, rows: int = 200, pool=None) -> AttackReport:
    """Recover one hidden column of test records from a logistic-regression target."""
    if pool is None:
        _, Z, y = _normalized_pool(cfg)
    else:
        Z, y = pool
    rng = np.random.default_rng([cfg.seed, 17])
    target = classifier_train(Z, y, None, "logreg", TrainSpec(epochs=10, learning_rate=0.1, seed=cfg.seed))
    probe = _balanced(y, rows // 2, rng)
    err, base = [], []
    for i in probe:
        res = attribute_inference(target, Z[i], [column], int(y[i]), bounds=(-5.0, 5.0))
        err.append(abs(res.row[column] - Z[i, column]))
        base.append(abs(Z[i, column]))  # mean imputation on standardized data is 0
    return AttackReport("attribute", {"completion_mae": float(np.mean(err)), "mean_imputation_mae": float(np.mean(base))},
                        {"column": column, "rows": int(probe.size)}, cfg.seed)


def run_leakage(cfg: ExperimentConfig, aux_size: int = 200, pipe=None) -> list[AttackReport]:
    """Flag recovery from shared embeddings, bracketed by no-signal and full-leak controls."""
    pipe = pipe or prepare(cfg)
    ds = pipe.dataset
    flags = ds.flags
    E = ae_encode(pipe.autoencoder, encode_flags(flags))
    noise = np.random.default_rng([cfg.seed, 19]).normal(size=E.shape)
    out = []
    for name, emb in (("embeddings", E), ("noise_control", noise), ("identity_control", encode_flags(flags))):
        rep = feature_leakage_probe(emb, flags, aux_size=aux_size, seed=cfg.seed)
        rep.config["source"] = name
        out.append(rep)
    return out


def attack_suite(cfg: ExperimentConfig) -> list[dict]:
    rows = []

    def add(attack, setting, rep: AttackReport):
        for metric, value in sorted(rep.metrics.items()):
            rows.append({"attack": attack, "setting": setting, "seed": cfg.seed, "metric": metric, "value": value})

    for rep in run_inversion(cfg):
        add("inversion", f"update_var={rep.config['noise_variance']:g}", rep)
    for rep in run_inversion(cfg, variances=(0.1,), on_gradient=True):
        add("inversion", f"gradient_var={rep.config['noise_variance']:g}", rep)
    pipe, Z, y = _normalized_pool(cfg)
    try:
        for rep in run_membership(cfg, pool=(Z, y)):
            add("membership", f"var={rep.config['noise_variance']:g}", rep)
        add("attribute", "logreg", run_attribute(cfg, pool=(Z, y)))
        for rep in run_leakage(cfg, pipe=pipe):
            add("leakage", rep.config["source"], rep)
    finally:
        pipe.close()
    return rows
