"""End-to-end experiment runner and the sweep presets."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import (
    N_TX_FEATURES,
    SAMPLING_METHODS,
    Dataset,
    GenConfig,
    encode_flags,
    generate,
    rebalance,
    shard_accounts,
    stratified_fraction,
)
from .federation import (
    FederationConfig,
    HybridFederation,
    RoundSchedule,
    centralized_autoencoder,
    fit_classifier,
)
from .metrics import aucpr, prf1
from .models import KINDS, Autoencoder, TrainSpec, ae_encode, classifier_predict, default_spec
from .privacy import NoiseSpec, add_gaussian_noise, noise_metrics
from .transport import ROUTE_MODES, InProcessBus, TcpTransport

log = logging.getLogger(__name__)

MODES = ("federated", "centralized")
TRANSPORTS = ("inprocess", "tcp")


@dataclass
class ExperimentConfig:
    data: GenConfig = field(default_factory=GenConfig)
    clients: int = 10
    interval: int = 50
    rounds: int = 1
    classifier: str = "gbdt"
    train: dict = field(default_factory=dict)  # TrainSpec overrides on top of the classifier default
    noise_variance: float = 0.0
    sampling: str = "none"
    route: str = "server"
    fraction: float = 1.0
    seed: int = 0
    mode: str = "federated"
    masking: bool = True
    encryption: bool = True
    weighted: bool = False
    transport: str = "inprocess"
    ae_learning_rate: float = 0.01
    ae_batch_size: int = 256

    def validate(self) -> None:
        self.data.validate()
        RoundSchedule(self.interval, self.rounds)
        if self.classifier not in KINDS:
            raise ValueError(f"unknown classifier {self.classifier!r}")
        if self.sampling not in SAMPLING_METHODS:
            raise ValueError(f"unknown sampling method {self.sampling!r}")
        if self.route not in ROUTE_MODES:
            raise ValueError(f"unknown route {self.route!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.transport not in TRANSPORTS:
            raise ValueError(f"unknown transport {self.transport!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be >= 0")
        if not 1 <= self.clients <= self.data.n_accounts:
            raise ValueError("clients must be between 1 and the number of accounts")
        self.train_spec().validate()

    @property
    def schedule(self) -> RoundSchedule:
        return RoundSchedule(self.interval, self.rounds)

    def train_spec(self) -> TrainSpec:
        return default_spec(self.classifier, seed=self.seed, **self.train)

    def ae_spec(self) -> TrainSpec:
        return TrainSpec(epochs=self.interval * self.rounds, learning_rate=self.ae_learning_rate,
                         batch_size=self.ae_batch_size, seed=self.seed)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["train"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.train.items()}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        doc = dict(doc)
        if "data" in doc:
            data = dict(doc["data"])
            bad = set(data) - {f.name for f in fields(GenConfig)}
            if bad:
                raise ValueError(f"unknown data fields: {sorted(bad)}")
            doc["data"] = GenConfig(**data)
        train = dict(doc.get("train", {}))
        if "hidden" in train:
            train["hidden"] = tuple(train["hidden"])
        doc["train"] = train
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def label(self) -> str:
        return (f"{self.mode}-{self.classifier}-M{self.clients}-I{self.interval}R{self.rounds}"
                f"-var{self.noise_variance:g}-{self.sampling}-{self.route}-f{self.fraction:g}-s{self.seed}")


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    aucpr: float
    privacy: dict = field(default_factory=dict)
    attacks: dict = field(default_factory=dict)
    runtime: float = 0.0
    n_train: int = 0
    n_test: int = 0
    n_failed_rows: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("precision", "recall", "f1", "aucpr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    def without_runtime(self) -> dict:
        doc = self.to_json()
        doc.pop("runtime")
        return doc


CSV_COLUMNS = ["mode", "classifier", "clients", "interval", "rounds", "noise_variance", "sampling", "route",
               "fraction", "seed", "n_train", "n_test", "n_failed_rows", "precision", "recall", "f1", "aucpr",
               "avg_l2", "avg_cos", "runtime"]


def report_row(config: ExperimentConfig, rep: MetricsReport) -> dict:
    row = {k: getattr(config, k) for k in CSV_COLUMNS[:10]}
    row.update(n_train=rep.n_train, n_test=rep.n_test, n_failed_rows=rep.n_failed_rows, precision=rep.precision,
               recall=rep.recall, f1=rep.f1, aucpr=rep.aucpr, avg_l2=rep.privacy.get("avg_l2", 0.0),
               avg_cos=rep.privacy.get("avg_cos", 1.0), runtime=round(rep.runtime, 3))
    return row


def write_csv(path: str | Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: r.get(c, "") for c in columns})


class PhaseError(RuntimeError):
    def __init__(self, phase: str, exc: BaseException):
        super().__init__(f"{phase} failed: {exc}")
        self.phase = phase


class _phase:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.debug("phase %s", self.name)

    def __exit__(self, kind, exc, tb):
        if exc is not None and not isinstance(exc, PhaseError):
            raise PhaseError(self.name, exc) from exc
        return False


# ---------------------------------------------------------------------------
# pipelines


class Pipeline:
    """Everything before classifier training: data, feature learning and the joined matrices.

    Sweeps over classifier, sampling or noise reuse one pipeline.
    """

    def __init__(self, config: ExperimentConfig, dataset: Dataset | None = None, transcript_path=None):
        self.config = config
        with _phase("generate"):
            self.dataset = dataset if dataset is not None else generate(config.data)
        ds = self.dataset
        with _phase("fraction"):
            keep = stratified_fraction(ds.labels[ds.train_idx], config.fraction, config.seed)
            self.train_rows = ds.train_idx[keep]
        self.test_rows = ds.test_idx
        init = Autoencoder.init(seed=config.seed)
        self.federation: HybridFederation | None = None
        if config.mode == "federated":
            with _phase("shard"):
                shards = shard_accounts(ds, config.clients, config.seed)
            fed_cfg = FederationConfig(schedule=config.schedule, ae_spec=config.ae_spec(), masking=config.masking,
                                       encryption=config.encryption, route=config.route, weighted=config.weighted,
                                       seed=config.seed)
            transport = TcpTransport() if config.transport == "tcp" else InProcessBus(config.seed)
            self.federation = HybridFederation(ds, shards, fed_cfg, transport, init=init)
            with _phase("feature-learning"):
                self.autoencoder = self.federation.run_feature_learning()
            with _phase("join"):
                res = self.federation.extract_and_join(self.train_rows)
            self.train_matrix = res.matrix
            self.train_labels = ds.labels[self.train_rows[res.ok]]
            self.join_errors = res.errors
        else:
            with _phase("feature-learning"):
                self.autoencoder = centralized_autoencoder(ds.flags, init, config.ae_spec())
            with _phase("join"):
                self._emb = ae_encode(self.autoencoder, encode_flags(ds.flags))
                self.train_matrix = self._join(self.train_rows)
            self.train_labels = ds.labels[self.train_rows]
            self.join_errors = {}
        self.transcript_path = transcript_path

    def _join(self, rows: np.ndarray) -> np.ndarray:
        ds = self.dataset
        pos = {int(a): i for i, a in enumerate(ds.account_ids)}
        s = np.array([pos[int(a)] for a in ds.sender[rows]], dtype=np.int64)
        r = np.array([pos[int(a)] for a in ds.receiver[rows]], dtype=np.int64)
        return np.hstack([self._emb[s], self._emb[r], ds.features[rows]])

    def run(self, classifier: str | None = None, noise_variance: float | None = None,
            sampling: str | None = None, train: dict | None = None) -> MetricsReport:
        """Train and evaluate one classifier on the prepared features."""
        t0 = time.perf_counter()
        cfg = replace(self.config,
                      classifier=classifier if classifier is not None else self.config.classifier,
                      noise_variance=noise_variance if noise_variance is not None else self.config.noise_variance,
                      sampling=sampling if sampling is not None else self.config.sampling,
                      train=train if train is not None else self.config.train)
        cfg.validate()
        noise = NoiseSpec(cfg.noise_variance, cfg.seed)
        with _phase("sampling"):
            tx_cols = slice(self.train_matrix.shape[1] - N_TX_FEATURES, None)
            X, y, w = rebalance(self.train_matrix, self.train_labels, cfg.sampling, cfg.seed, metric_columns=tx_cols)
            weights = None if cfg.sampling != "reweight" else w
        with _phase("train"):
            if self.federation is not None:
                clf = self.federation.train_phase(X, y, cfg.classifier, cfg.train_spec(), noise, weights)
                stats = self.federation.tx.norm
            else:
                clf, stats = fit_classifier(X, y, cfg.classifier, cfg.train_spec(), noise, weights)
        with _phase("inference"):
            if self.federation is not None:
                res = self.federation.infer(self.test_rows)
                ok = ~np.isnan(res.scores)
                scores, failed = res.scores[ok], int((~ok).sum())
                labels = self.dataset.labels[self.test_rows[ok]]
            else:
                scores = np.asarray(classifier_predict(clf, stats.apply(self._join(self.test_rows))))
                labels = self.dataset.labels[self.test_rows]
                failed = 0
        with _phase("metrics"):
            p, r, f = prf1(scores, labels)
            privacy = {}
            if cfg.noise_variance > 0:
                Z = stats.apply(X)
                privacy = noise_metrics(Z, add_gaussian_noise(Z, noise))
        if self.transcript_path is not None and self.federation is not None:
            self.federation.transport.dump_transcript(self.transcript_path)
        return MetricsReport(p, r, f, aucpr(scores, labels), privacy, {}, time.perf_counter() - t0 + self._setup_time,
                             len(y), len(labels), failed + len(self.join_errors), cfg.to_json())

    _setup_time = 0.0

    def close(self) -> None:
        if self.federation is not None:
            self.federation.close()


def prepare(config: ExperimentConfig, dataset: Dataset | None = None, transcript_path=None) -> Pipeline:
    config.validate()
    t0 = time.perf_counter()
    pipe = Pipeline(config, dataset, transcript_path)
    pipe._setup_time = time.perf_counter() - t0
    return pipe


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   dump_transcript: str | Path | None = None) -> MetricsReport:
    """generate -> shard -> feature learning -> join -> sampling -> train -> infer -> metrics."""
    pipe = prepare(config, transcript_path=dump_transcript)
    try:
        rep = pipe.run()
    finally:
        pipe.close()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True) + "\n")
        write_csv(out / "results.csv", [report_row(config, rep)], CSV_COLUMNS)
    return rep


# ---------------------------------------------------------------------------
# presets

PRESETS = ("table1", "table2", "table3", "table4", "table5", "fig4", "attacks")
FIG4_VARIANCES = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 0.5)
TABLE3_SCHEDULES = ((1, 50), (5, 10), (10, 5), (50, 1))
TABLE4_CLIENTS = (1, 10, 50, 100, 200)
TABLE5_FRACTIONS = (1.0, 0.5, 0.1, 0.01, 0.002)
TABLE2_SAMPLING = ("none", "under", "over", "smote", "reweight")
TABLE1_SETTINGS = ("centralized", "vanilla", "hyfl")

PRESET_COLUMNS = {
    "table1": ["setting", "classifier", "seed", "aucpr", "precision", "recall", "f1"],
    "table2": ["sampling", "seed", "aucpr", "precision", "recall", "f1"],
    "table3": ["schedule", "seed", "aucpr", "precision", "recall", "f1"],
    "table4": ["clients", "seed", "aucpr", "precision", "recall", "f1"],
    "table5": ["fraction", "seed", "n_train", "aucpr", "precision", "recall", "f1"],
    "fig4": ["variance", "seed", "aucpr", "avg_l2", "avg_cos"],
    "attacks": ["attack", "setting", "seed", "metric", "value"],
}


def _metrics_row(rep: MetricsReport) -> dict:
    return {"aucpr": rep.aucpr, "precision": rep.precision, "recall": rep.recall, "f1": rep.f1}


def setting_config(base: ExperimentConfig, setting: str) -> ExperimentConfig:
    if setting == "centralized":
        return replace(base, mode="centralized", noise_variance=0.0)
    if setting == "vanilla":
        return replace(base, mode="federated", noise_variance=0.0, masking=False, encryption=False)
    if setting == "hyfl":
        return replace(base, mode="federated", noise_variance=0.01, masking=True, encryption=True)
    raise ValueError(f"unknown setting {setting!r}")


def run_preset(name: str, base: ExperimentConfig | None = None, seeds: tuple[int, ...] = (1,),
               out_dir: str | Path | None = None) -> list[dict]:
    """Sweep one knob grid; returns the CSV rows (and writes ``<name>.csv`` under ``out_dir``)."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    base = base or ExperimentConfig()
    rows: list[dict] = []
    for seed in seeds:
        cfg = replace(base, seed=seed, data=replace(base.data, seed=seed))
        rows += _PRESET_RUNNERS[name](cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / f"{name}.csv", rows, PRESET_COLUMNS[name])
    return rows


def _sweep(cfg: ExperimentConfig, knob: str, values, **run_kw) -> list[tuple[object, MetricsReport]]:
    out = []
    ds = generate(cfg.data)
    for v in values:
        pipe = prepare(replace(cfg, **{knob: v}), ds)
        try:
            out.append((v, pipe.run(**run_kw)))
        finally:
            pipe.close()
    return out


def _table1(cfg):
    rows = []
    ds = generate(cfg.data)
    for setting in TABLE1_SETTINGS:
        pipe = prepare(setting_config(cfg, setting), ds)
        try:
            for kind in KINDS:
                rep = pipe.run(classifier=kind, train={})
                rows.append({"setting": setting, "classifier": kind, "seed": cfg.seed, **_metrics_row(rep)})
        finally:
            pipe.close()
    return rows


def _table2(cfg):
    pipe = prepare(cfg)
    try:
        return [{"sampling": s, "seed": cfg.seed, **_metrics_row(pipe.run(sampling=s))} for s in TABLE2_SAMPLING]
    finally:
        pipe.close()


def _table3(cfg):
    rows = []
    ds = generate(cfg.data)
    for i, r in TABLE3_SCHEDULES:
        pipe = prepare(replace(cfg, interval=i, rounds=r), ds)
        try:
            rows.append({"schedule": f"I{i}-R{r}", "seed": cfg.seed, **_metrics_row(pipe.run())})
        finally:
            pipe.close()
    return rows


def _table4(cfg):
    return [{"clients": m, "seed": cfg.seed, **_metrics_row(rep)}
            for m, rep in _sweep(cfg, "clients", TABLE4_CLIENTS)]


def _table5(cfg):
    return [{"fraction": f, "seed": cfg.seed, "n_train": rep.n_train, **_metrics_row(rep)}
            for f, rep in _sweep(cfg, "fraction", TABLE5_FRACTIONS)]


def _fig4(cfg):
    pipe = prepare(cfg)
    rows = []
    try:
        for var in FIG4_VARIANCES:
            rep = pipe.run(noise_variance=var)
            rows.append({"variance": var, "seed": cfg.seed, "aucpr": rep.aucpr,
                         "avg_l2": rep.privacy.get("avg_l2", 0.0), "avg_cos": rep.privacy.get("avg_cos", 1.0)})
    finally:
        pipe.close()
    return rows


def _attacks(cfg):
    from .red_team import attack_suite

    return attack_suite(cfg)


_PRESET_RUNNERS = {"table1": _table1, "table2": _table2, "table3": _table3, "table4": _table4,
                   "table5": _table5, "fig4": _fig4, "attacks": _attacks}
