import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyfl.data import (
    HIGH_FLAG,
    N_TX_FEATURES,
    AccountRecord,
    Dataset,
    GenConfig,
    encode_flags,
    generate,
    rebalance,
    shard_accounts,
    stratified_fraction,
)


def _arrays(ds: Dataset):
    return [ds.tx_ids, ds.features, ds.sender, ds.receiver, ds.labels, ds.account_ids, ds.flags, ds.train_idx,
            ds.test_idx]


def test_generate_sizes():
    ds = generate(GenConfig(n_train=10_000, positive_rate=0.01, n_accounts=500, seed=7))
    assert ds.train_idx.size == 10_000
    assert ds.test_idx.size == 2500
    assert ds.labels[ds.train_idx].sum() == 100
    assert ds.features.shape == (12_500, N_TX_FEATURES)


def test_generate_is_deterministic():
    cfg = GenConfig(n_train=2000, n_accounts=300, seed=3)
    a, b = generate(cfg), generate(cfg)
    for x, y in zip(_arrays(a), _arrays(b)):
        assert x.tobytes() == y.tobytes()


def test_generate_seed_changes_data():
    a = generate(GenConfig(n_train=500, n_accounts=100, seed=1))
    b = generate(GenConfig(n_train=500, n_accounts=100, seed=2))
    assert not np.array_equal(a.features, b.features)


def test_flag_crime_correlation():
    ds = generate(GenConfig(n_train=20_000, n_accounts=2000, positive_rate=0.05, flag_crime_correlation=0.9, seed=4))
    high = ds.flag_of(ds.sender) >= HIGH_FLAG
    high |= ds.flag_of(ds.receiver) >= HIGH_FLAG
    y = ds.labels
    gap = high[y == 1].mean() - high[y == 0].mean()
    assert gap > 0.3


def test_no_self_transfers(small_dataset):
    assert np.all(small_dataset.sender != small_dataset.receiver)
    small_dataset.validate()


@pytest.mark.parametrize("kw", [dict(n_train=0), dict(positive_rate=0.0), dict(positive_rate=1.0),
                                dict(flag_crime_correlation=1.5), dict(n_accounts=1)])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        generate(GenConfig(**kw))


def test_account_record_range():
    with pytest.raises(ValueError):
        AccountRecord(1, 12)


def test_csv_round_trip(tmp_path, small_dataset):
    small_dataset.to_csv(tmp_path)
    back = Dataset.from_csv(tmp_path)
    for x, y in zip(_arrays(small_dataset), _arrays(back)):
        np.testing.assert_array_equal(x, y)


def test_encode_flags():
    enc = encode_flags([0, 11, 5])
    assert enc.shape == (3, 13)
    np.testing.assert_allclose(enc[:, 0], [0.0, 1.0, 5 / 11])
    assert enc[1, 12] == 1.0 and enc[2, 6] == 1.0
    np.testing.assert_array_equal(enc[:, 1:].sum(1), 1.0)
    with pytest.raises(ValueError):
        encode_flags([12])


def test_shard_single_client(small_dataset):
    (shard,) = shard_accounts(small_dataset, 1, seed=0)
    np.testing.assert_array_equal(shard.account_ids, small_dataset.account_ids)
    assert shard.client_id == 1


def test_shard_even_split():
    ds = generate(GenConfig(n_train=100, n_accounts=1000, seed=0))
    assert [len(s.records) for s in shard_accounts(ds, 10, seed=0)] == [100] * 10


def test_shard_three_over_ten():
    ds = generate(GenConfig(n_train=50, n_accounts=10, seed=0))
    shards = shard_accounts(ds, 3, seed=9)
    assert sorted(len(s.records) for s in shards) == [3, 3, 4]
    ids = np.concatenate([s.account_ids for s in shards])
    assert sorted(ids.tolist()) == list(range(10))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 60), m=st.integers(1, 60), seed=st.integers(0, 2**16))
def test_shard_partition_property(n, m, seed):
    m = min(m, n)
    ds = generate(GenConfig(n_train=10, n_accounts=n, seed=1))
    shards = shard_accounts(ds, m, seed)
    sizes = [len(s.records) for s in shards]
    assert max(sizes) - min(sizes) <= 1
    ids = np.concatenate([s.account_ids for s in shards])
    assert np.array_equal(np.sort(ids), ds.account_ids)
    for s in shards:
        np.testing.assert_array_equal(s.flags, ds.flag_of(s.account_ids))


def test_shard_bad_count(small_dataset):
    with pytest.raises(ValueError):
        shard_accounts(small_dataset, 0, 0)
    with pytest.raises(ValueError):
        shard_accounts(small_dataset, len(small_dataset.account_ids) + 1, 0)


def _toy(n_pos, n_neg, d=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_pos + n_neg, d))
    y = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
    return X, y


@pytest.mark.parametrize("method", ["none", "under", "over", "smote", "reweight"])
def test_balanced_input_is_left_balanced(method):
    X, y = _toy(20, 20)
    Xo, yo, w = rebalance(X, y, method, seed=0)
    assert yo.sum() * 2 == yo.size
    if method == "reweight":
        np.testing.assert_array_equal(w, 1.0)


def test_reweight_ratio():
    X, y = _toy(2, 200)
    _, _, w = rebalance(X, y, "reweight", seed=0)
    assert np.all(w[y == 1] == 100.0)
    assert np.all(w[y == 0] == 1.0)


@pytest.mark.parametrize("method", ["under", "over", "smote"])
def test_resampling_balances(method):
    X, y = _toy(7, 93)
    Xo, yo, w = rebalance(X, y, method, seed=2)
    assert int(yo.sum()) == int((yo == 0).sum())
    np.testing.assert_array_equal(w, 1.0)


def test_smote_points_lie_on_segments():
    X, y = _toy(12, 80, d=4, seed=3)
    Xo, yo, _ = rebalance(X, y, "smote", seed=5)
    P = X[y == 1]
    synth = Xo[len(X):]
    for s in synth:
        found = False
        for i in range(len(P)):
            for j in range(len(P)):
                if i == j:
                    continue
                d = P[j] - P[i]
                u = np.dot(s - P[i], d) / np.dot(d, d)
                if -1e-12 <= u <= 1 + 1e-12 and np.allclose(P[i] + u * d, s, atol=1e-10):
                    found = True
                    break
            if found:
                break
        assert found


def test_smote_metric_columns_pick_neighbors():
    # positives sit in two far-apart clusters on column 0; column 1 is large noise
    P = np.array([[0.0, 0.0], [0.1, 50.0], [10.0, 1.0], [10.1, 49.0]])
    X = np.vstack([P, np.zeros((20, 2)) + 5])
    y = np.r_[np.ones(4, int), np.zeros(20, int)]
    Xo, _, _ = rebalance(X, y, "smote", seed=0, k=1, metric_columns=[0])
    synth = Xo[len(X):]
    assert np.all((synth[:, 0] <= 0.1) | (synth[:, 0] >= 10.0))


def test_rebalance_rejects_single_class():
    X, y = _toy(0, 10)
    with pytest.raises(ValueError):
        rebalance(X, y, "under", 0)
    X, y = _toy(3, 10)
    with pytest.raises(ValueError):
        rebalance(X, y, "bogus", 0)


def test_stratified_fraction_half():
    y = np.r_[np.ones(101, int), np.zeros(9899, int)]
    keep = stratified_fraction(y, 0.5, seed=0)
    assert abs(keep.size - 5000) <= 1
    assert abs(int(y[keep].sum()) - 50.5) <= 1
    assert np.unique(keep).size == keep.size


def test_stratified_fraction_keeps_each_class():
    y = np.r_[np.ones(3, int), np.zeros(997, int)]
    keep = stratified_fraction(y, 0.002, seed=1)
    assert y[keep].sum() >= 1 and (y[keep] == 0).sum() >= 1
    np.testing.assert_array_equal(stratified_fraction(y, 1.0, 0), np.arange(1000))
    with pytest.raises(ValueError):
        stratified_fraction(y, 0.0, 0)
