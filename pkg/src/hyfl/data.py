"""Transaction/account records, the synthetic payment-network generator,
account sharding and class-imbalance handling.

Transactions are stored column-wise (numpy arrays) because the default
desk-scale run has 125k rows; :meth:`Dataset.transaction_records` yields the
per-row view when one is needed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

N_TX_FEATURES = 7
N_FLAGS = 12
MAX_FLAG = N_FLAGS - 1
HIGH_FLAG = 8
FLAG_ENCODING_DIM = N_FLAGS + 1

TX_FEATURE_NAMES = (
    "amount",
    "frequency",
    "currency_avg_amount",
    "hour",
    "receiver_age_days",
    "cross_border",
    "velocity_ratio",
)

# per-currency average transfer amount
_CURRENCY_AVG = np.array([40.0, 120.0, 310.0, 800.0, 1500.0, 4200.0, 9000.0, 21000.0])
_REPORTING_MULTIPLE = 10.0


@dataclass(frozen=True)
class TransactionRecord:
    tx_id: int
    features: tuple[float, ...]
    sender_account: int
    receiver_account: int
    label: int

    def __post_init__(self) -> None:
        if len(self.features) != N_TX_FEATURES:
            raise ValueError(f"expected {N_TX_FEATURES} features, got {len(self.features)}")
        if self.sender_account == self.receiver_account:
            raise ValueError("sender and receiver must differ")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class AccountRecord:
    account_id: int
    flag: int

    def __post_init__(self) -> None:
        if not 0 <= self.flag <= MAX_FLAG:
            raise ValueError(f"flag {self.flag} outside [0, {MAX_FLAG}]")


@dataclass
class GenConfig:
    n_train: int = 100_000
    positive_rate: float = 0.01
    n_accounts: int = 10_000
    flag_crime_correlation: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        if self.n_train < 1 or self.n_accounts < 1:
            raise ValueError("counts must be >= 1")
        if not 0.0 < self.positive_rate < 1.0:
            raise ValueError("positive_rate must lie in (0, 1)")
        if not 0.0 <= self.flag_crime_correlation <= 1.0:
            raise ValueError("flag_crime_correlation must lie in [0, 1]")
        if self.n_accounts < 2:
            raise ValueError("need at least 2 accounts to form sender != receiver pairs")


@dataclass
class Dataset:
    tx_ids: np.ndarray
    features: np.ndarray
    sender: np.ndarray
    receiver: np.ndarray
    labels: np.ndarray
    account_ids: np.ndarray
    flags: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    _flag_lookup: dict[int, int] = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self._flag_lookup = {int(a): int(f) for a, f in zip(self.account_ids, self.flags)}

    @property
    def accounts(self) -> dict[int, AccountRecord]:
        return {a: AccountRecord(a, f) for a, f in self._flag_lookup.items()}

    def flag_of(self, account_ids: Sequence[int] | np.ndarray) -> np.ndarray:
        return np.array([self._flag_lookup[int(a)] for a in account_ids], dtype=np.int64)

    @property
    def n_transactions(self) -> int:
        return len(self.tx_ids)

    def transaction_records(self, idx: Sequence[int] | np.ndarray | None = None) -> Iterator[TransactionRecord]:
        rows = range(self.n_transactions) if idx is None else idx
        for i in rows:
            yield TransactionRecord(
                int(self.tx_ids[i]),
                tuple(float(v) for v in self.features[i]),
                int(self.sender[i]),
                int(self.receiver[i]),
                int(self.labels[i]),
            )

    def validate(self) -> None:
        if self.features.shape[1] != N_TX_FEATURES:
            raise ValueError("transaction features must have 7 columns")
        if np.any(self.sender == self.receiver):
            raise ValueError("found a self-transfer")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        known = set(self._flag_lookup)
        if not (set(np.unique(self.sender).tolist()) | set(np.unique(self.receiver).tolist())) <= known:
            raise ValueError("transaction references an unknown account")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ValueError("train and test overlap")

    def to_csv(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        split = np.empty(self.n_transactions, dtype=object)
        split[self.train_idx] = "train"
        split[self.test_idx] = "test"
        with open(directory / "transactions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["tx_id", *[f"f{k}" for k in range(1, N_TX_FEATURES + 1)], "sender", "receiver", "label", "split"])
            for i in range(self.n_transactions):
                w.writerow(
                    [int(self.tx_ids[i]), *[repr(float(v)) for v in self.features[i]],
                     int(self.sender[i]), int(self.receiver[i]), int(self.labels[i]), split[i]]
                )
        with open(directory / "accounts.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["account_id", "flag"])
            for a, f in zip(self.account_ids, self.flags):
                w.writerow([int(a), int(f)])

    @classmethod
    def from_csv(cls, directory: str | Path) -> "Dataset":
        directory = Path(directory)
        with open(directory / "transactions.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        with open(directory / "accounts.csv", newline="", encoding="utf-8") as fh:
            acc = list(csv.DictReader(fh))
        feats = np.array([[float(r[f"f{k}"]) for k in range(1, N_TX_FEATURES + 1)] for r in rows]).reshape(-1, N_TX_FEATURES)
        split = np.array([r.get("split", "train") for r in rows])
        ds = cls(
            tx_ids=np.array([int(r["tx_id"]) for r in rows], dtype=np.int64),
            features=feats,
            sender=np.array([int(r["sender"]) for r in rows], dtype=np.int64),
            receiver=np.array([int(r["receiver"]) for r in rows], dtype=np.int64),
            labels=np.array([int(r["label"]) for r in rows], dtype=np.int64),
            account_ids=np.array([int(r["account_id"]) for r in acc], dtype=np.int64),
            flags=np.array([int(r["flag"]) for r in acc], dtype=np.int64),
            train_idx=np.flatnonzero(split == "train"),
            test_idx=np.flatnonzero(split == "test"),
        )
        ds.validate()
        return ds


@dataclass
class AccountShard:
    client_id: int
    records: list[AccountRecord]

    @property
    def account_ids(self) -> np.ndarray:
        return np.array([r.account_id for r in self.records], dtype=np.int64)

    @property
    def flags(self) -> np.ndarray:
        return np.array([r.flag for r in self.records], dtype=np.int64)


def encode_flags(flags: Sequence[int] | np.ndarray) -> np.ndarray:
    """Model input for account flags: ``flag / 11`` followed by a 12-way one-hot."""
    flags = np.asarray(flags, dtype=np.int64)
    if flags.size and (flags.min() < 0 or flags.max() > MAX_FLAG):
        raise ValueError("flag outside [0, 11]")
    out = np.zeros((flags.size, FLAG_ENCODING_DIM))
    out[:, 0] = flags / MAX_FLAG
    out[np.arange(flags.size), 1 + flags] = 1.0
    return out


def _flag_distribution() -> np.ndarray:
    p = 0.62 ** np.arange(N_FLAGS)
    p[HIGH_FLAG:] = p[HIGH_FLAG:] + 0.01
    return p / p.sum()


def _labels(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    k = int(round(n * rate))
    y = np.zeros(n, dtype=np.int64)
    y[:k] = 1
    rng.shuffle(y)
    return y


def _distinct_partner(src: np.ndarray, n_accounts: int, rng: np.random.Generator) -> np.ndarray:
    return (src + rng.integers(1, n_accounts, size=src.size)) % n_accounts


def generate(config: GenConfig) -> Dataset:
    """Synthesize a payment-network dataset.

    Benign transfers draw amounts around their currency's average at any hour.
    Crime transfers follow one of three typologies (structuring just below the
    reporting threshold, night-time mule payouts, sender bursts), and a fifth of
    them are camouflaged to look benign. With probability
    ``flag_crime_correlation`` a crime transfer touches a high-flag account.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_test = math.ceil(config.n_train / 4)
    n = config.n_train + n_test
    A = config.n_accounts

    flags = rng.choice(N_FLAGS, size=A, p=_flag_distribution()).astype(np.int64)
    account_ids = np.arange(A, dtype=np.int64)
    high = np.flatnonzero(flags >= HIGH_FLAG)
    if high.size == 0:
        high = np.array([int(rng.integers(A))])
        flags[high] = HIGH_FLAG

    y = np.concatenate([_labels(config.n_train, config.positive_rate, rng), _labels(n_test, config.positive_rate, rng)])
    pos = y == 1

    # per-account activity level drives transfer frequency
    activity = rng.gamma(2.0, 4.0, size=A)
    sender = rng.integers(0, A, size=n)
    receiver = _distinct_partner(sender, A, rng)

    typology = rng.choice(4, size=n, p=[0.3, 0.3, 0.2, 0.2])  # structuring, mule, burst, camouflaged
    typology[~pos] = -1
    touch = pos & (rng.random(n) < config.flag_crime_correlation)
    # mules receive, bursting senders send; others pick an endpoint at random
    as_receiver = np.where(typology == 1, True, np.where(typology == 2, False, rng.random(n) < 0.5))
    hi_pick = high[rng.integers(0, high.size, size=n)]
    recv_hi = touch & as_receiver
    send_hi = touch & ~as_receiver
    receiver = np.where(recv_hi, hi_pick, receiver)
    sender = np.where(send_hi, hi_pick, sender)
    clash = sender == receiver
    receiver[clash & ~recv_hi] = _distinct_partner(sender[clash & ~recv_hi], A, rng)
    sender[clash & recv_hi] = _distinct_partner(receiver[clash & recv_hi], A, rng)

    currency = rng.integers(0, _CURRENCY_AVG.size, size=n)
    cur_avg = _CURRENCY_AVG[currency]
    ratio = np.exp(rng.normal(0.0, 0.8, size=n))
    structuring = typology == 0
    ratio[structuring] = _REPORTING_MULTIPLE * rng.uniform(0.86, 0.99, size=structuring.sum())
    amount = cur_avg * ratio

    freq = rng.poisson(activity[sender]).astype(float)
    burst = typology == 2
    freq[burst] = freq[burst] + rng.poisson(25.0, size=burst.sum())

    hour = rng.uniform(0.0, 24.0, size=n)
    mule = typology == 1
    hour[mule] = np.mod(rng.normal(3.0, 1.2, size=mule.sum()), 24.0)

    age = np.exp(rng.uniform(np.log(30.0), np.log(5000.0), size=n))
    age[mule] = np.exp(rng.uniform(np.log(5.0), np.log(90.0), size=mule.sum()))

    cross = rng.beta(1.2, 4.0, size=n)
    cross[burst] = rng.beta(4.0, 1.5, size=burst.sum())

    velocity = ratio * np.exp(rng.normal(0.0, 0.3, size=n))
    velocity[burst] = velocity[burst] * rng.uniform(2.0, 6.0, size=burst.sum())

    features = np.column_stack([amount, freq, cur_avg, hour, age, cross, velocity])
    ds = Dataset(
        tx_ids=np.arange(n, dtype=np.int64),
        features=features,
        sender=sender.astype(np.int64),
        receiver=receiver.astype(np.int64),
        labels=y,
        account_ids=account_ids,
        flags=flags,
        train_idx=np.arange(config.n_train, dtype=np.int64),
        test_idx=np.arange(config.n_train, n, dtype=np.int64),
    )
    return ds


def shard_accounts(dataset: Dataset, m: int, seed: int) -> list[AccountShard]:
    """Randomly split the accounts over ``m`` clients; shard sizes differ by at most one."""
    n = len(dataset.account_ids)
    if not 1 <= m <= n:
        raise ValueError(f"cannot split {n} accounts over {m} clients")
    perm = np.random.default_rng(seed).permutation(n)
    shards = []
    for k, part in enumerate(np.array_split(perm, m)):
        part = np.sort(part)
        shards.append(
            AccountShard(k + 1, [AccountRecord(int(dataset.account_ids[i]), int(dataset.flags[i])) for i in part])
        )
    return shards


SAMPLING_METHODS = ("none", "under", "over", "smote", "reweight")


def rebalance(
    X: np.ndarray,
    y: np.ndarray,
    method: str,
    seed: int,
    k: int = 5,
    metric_columns: slice | Sequence[int] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(X, y, weights)`` with classes balanced by ``method``.

    ``metric_columns`` selects the columns SMOTE measures neighbor distance on;
    synthetic rows interpolate every column.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("rebalance needs both classes present")
    rng = np.random.default_rng(seed)
    if method == "none":
        return X, y, np.ones(len(y))
    if method == "reweight":
        w = np.ones(len(y))
        w[pos] = neg.size / pos.size
        return X, y, w

    minority, majority = (pos, neg) if pos.size <= neg.size else (neg, pos)
    deficit = majority.size - minority.size
    if method == "under":
        keep = np.sort(np.concatenate([minority, rng.choice(majority, size=minority.size, replace=False)]))
        return X[keep], y[keep], np.ones(keep.size)
    if method == "over":
        extra = rng.choice(minority, size=deficit, replace=True)
        idx = np.concatenate([np.arange(len(y)), extra])
        return X[idx], y[idx], np.ones(idx.size)
    if method == "smote":
        if minority.size < 2:
            raise ValueError("SMOTE needs at least two minority rows")
        synth = smote(X[minority], deficit, rng, k=k, metric_columns=metric_columns)
        Xo = np.vstack([X, synth])
        yo = np.concatenate([y, np.full(deficit, y[minority[0]])])
        return Xo, yo, np.ones(len(yo))
    raise ValueError(f"unknown sampling method {method!r}")


def smote(
    P: np.ndarray,
    n_new: int,
    rng: np.random.Generator,
    k: int = 5,
    metric_columns: slice | Sequence[int] | None = None,
) -> np.ndarray:
    k = min(k, len(P) - 1)
    Z = P if metric_columns is None else P[:, metric_columns]
    neighbors = np.empty((len(P), k), dtype=np.int64)
    sq = (Z * Z).sum(1)
    for start in range(0, len(P), 1024):
        block = Z[start:start + 1024]
        d = sq[start:start + 1024, None] + sq[None, :] - 2.0 * block @ Z.T
        d[np.arange(len(block)), np.arange(start, start + len(block))] = np.inf
        nn = np.argpartition(d, k - 1, axis=1)[:, :k] if k < len(P) - 1 else np.argsort(d, axis=1)[:, :k]
        neighbors[start:start + len(block)] = nn
    base = rng.integers(0, len(P), size=n_new)
    nb = neighbors[base, rng.integers(0, k, size=n_new)]
    u = rng.random(n_new)[:, None]
    return P[base] + u * (P[nb] - P[base])


def stratified_fraction(y: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Indices of a class-stratified subsample of size ``fraction`` of ``y``."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1.0:
        return np.arange(len(y))
    rng = np.random.default_rng(seed)
    keep = []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        take = max(1, int(round(fraction * idx.size))) if idx.size else 0
        keep.append(rng.choice(idx, size=take, replace=False))
    return np.sort(np.concatenate(keep))
