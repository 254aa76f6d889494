import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyfl.data import AccountShard, GenConfig, encode_flags, generate, shard_accounts
from hyfl.federation import (
    SERVER,
    TX,
    FederationConfig,
    HybridFederation,
    ProtocolError,
    RoundSchedule,
    aggregate,
    audit_transcript,
    centralized_autoencoder,
    fit_classifier,
    run_feature_learning,
)
from hyfl.models import Autoencoder, TrainSpec, ae_encode, classifier_predict, default_spec
from hyfl.privacy import NoiseSpec
from hyfl.transport import EmbeddingQuery, EmbeddingReply
from helpers import run_protocol


@pytest.fixture(scope="module")
def tiny():
    return generate(GenConfig(n_train=600, n_accounts=60, positive_rate=0.05, seed=2))


SPEC = TrainSpec(epochs=4, learning_rate=0.05, batch_size=16, seed=3)


def test_aggregate_examples():
    v = np.array([0.5, -2.0, 7.0])
    np.testing.assert_array_equal(aggregate([v]), v)
    np.testing.assert_array_equal(aggregate([v, -v]), 0.0)
    np.testing.assert_array_equal(aggregate([np.array([1.0, 2, 3]), np.array([3.0, 2, 1])]), [2.0, 2.0, 2.0])
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([np.ones(2), np.ones(3)])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 8))
def test_aggregate_is_order_free(seed, m):
    rng = np.random.default_rng(seed)
    ups = [rng.normal(0, 10.0 ** rng.integers(-3, 4), size=9) for _ in range(m)]
    a = aggregate(ups)
    assert np.array_equal(a, aggregate(ups[::-1]))
    np.testing.assert_allclose(a, np.mean(ups, axis=0), rtol=1e-12, atol=1e-12)


def test_schedule_conservation():
    assert RoundSchedule(5, 10).total_epochs == 50
    assert RoundSchedule(1, 50).label == "I1-R50"
    with pytest.raises(ValueError):
        RoundSchedule(0, 3)


def test_single_client_equals_centralized(tiny):
    init = Autoencoder.init(seed=1)
    central = centralized_autoencoder(tiny.flags, init, SPEC)
    for sched in (RoundSchedule(4, 1), RoundSchedule(1, 4), RoundSchedule(2, 2)):
        fed = run_feature_learning(shard_accounts(tiny, 1, 0), sched, init, SPEC, masking=False)
        assert fed.to_vector().tobytes() == central.to_vector().tobytes()


def test_single_client_masked_within_quantization(tiny):
    init = Autoencoder.init(seed=1)
    central = centralized_autoencoder(tiny.flags, init, SPEC)
    fed = run_feature_learning(shard_accounts(tiny, 1, 0), RoundSchedule(4, 1), init, SPEC, masking=True)
    assert np.max(np.abs(fed.to_vector() - central.to_vector())) <= 2.0 ** -20


def test_identical_shards_aggregate_to_single_model(tiny):
    records = shard_accounts(tiny, 1, 0)[0].records
    spec = TrainSpec(epochs=3, learning_rate=0.05, batch_size=1000, seed=0)
    init = Autoencoder.init(seed=2)
    one = run_feature_learning([AccountShard(1, records)], RoundSchedule(1, 3), init, spec, masking=False)
    three = run_feature_learning([AccountShard(i, records) for i in (1, 2, 3)], RoundSchedule(1, 3), init, spec,
                                 masking=False)
    np.testing.assert_allclose(three.to_vector(), one.to_vector(), atol=1e-9)


def test_schedule_matters_on_heterogeneous_shards():
    ds = generate(GenConfig(n_train=100, n_accounts=80, seed=6))
    records = sorted(shard_accounts(ds, 1, 0)[0].records, key=lambda r: r.flag)
    shards = [AccountShard(1, records[:40]), AccountShard(2, records[40:])]
    init = Autoencoder.init(seed=0)
    a = run_feature_learning(shards, RoundSchedule(1, 6), init, SPEC, masking=False)
    b = run_feature_learning(shards, RoundSchedule(6, 1), init, SPEC, masking=False)
    assert np.linalg.norm(a.to_vector() - b.to_vector()) > 0


def test_weighted_equal_shards_matches_unweighted():
    ds = generate(GenConfig(n_train=100, n_accounts=60, seed=7))
    shards = shard_accounts(ds, 3, 1)
    init = Autoencoder.init(seed=0)
    a = run_feature_learning(shards, RoundSchedule(2, 2), init, SPEC, masking=False)
    b = run_feature_learning(shards, RoundSchedule(2, 2), init, SPEC, masking=False, weighted=True)
    np.testing.assert_allclose(a.to_vector(), b.to_vector(), atol=1e-12)


def test_join_layout_and_dedup(tiny):
    fed, ae, joined, _, _ = run_protocol(tiny, m=3, seed=0)
    rows = tiny.train_idx
    assert joined.matrix.shape == (len(rows), 15)
    assert joined.ok.all() and not joined.errors
    np.testing.assert_array_equal(joined.matrix[:, 8:], tiny.features[rows])
    E = ae_encode(ae, encode_flags(tiny.flag_of(tiny.sender[rows])))
    np.testing.assert_allclose(joined.matrix[:, :4], E, atol=1e-12)
    # every account is asked for once per batch, however many transactions touch it
    first_batch = []
    for e in fed.transport.transcript:
        if e.msg_type == EmbeddingQuery.TYPE and e.sender == TX:
            first_batch.extend(e.message().accounts)
        if e.msg_type == 0x07:
            break
    unique = np.unique(np.r_[tiny.sender[rows], tiny.receiver[rows]])
    assert sorted(first_batch) == unique.tolist()
    fed.close()


def test_two_transactions_share_one_query(tiny):
    fed, *_ = run_protocol(tiny, m=2, seed=0)
    shared = tiny.sender[0]
    rows = np.flatnonzero(tiny.sender == shared)[:2]
    start = len(fed.transport.transcript)
    res = fed.extract_and_join(rows)
    assert res.ok.all()
    asked = [a for e in fed.transport.transcript[start:]
             if e.msg_type == EmbeddingQuery.TYPE and e.sender == TX for a in e.message().accounts]
    assert asked.count(int(shared)) == 1
    fed.close()


def test_inference_matches_training_matrix(tiny):
    fed, _, joined, clf, _ = run_protocol(tiny, m=3, seed=1, kind="gbdt")
    stats = fed.tx.norm
    rows = tiny.train_idx[:30]
    inf = fed.infer(rows)
    expected = classifier_predict(clf, stats.apply(joined.matrix[:30]))
    np.testing.assert_array_equal(inf.scores, expected)
    again = fed.infer(rows)
    np.testing.assert_array_equal(again.scores, inf.scores)
    fed.close()


def test_missing_account_client_gives_row_errors(tiny):
    fed, *_ = run_protocol(tiny, m=3, seed=2)
    victim = fed.account_clients[2]
    owned = set(victim._flags)
    fed.remove_account_client(2)
    rows = tiny.test_idx[:80]
    res = fed.infer(rows)
    hit = np.array([int(tiny.sender[r]) in owned or int(tiny.receiver[r]) in owned for r in rows])
    assert hit.any() and (~hit).any()
    assert np.isnan(res.scores[hit]).all() and (res.labels[hit] == -1).all()
    assert np.isfinite(res.scores[~hit]).all()
    assert set(res.errors) == set(int(r) for r in rows[hit])
    fed.close()


def test_missing_client_stalls_training_with_diagnostic(tiny):
    cfg = FederationConfig(schedule=RoundSchedule(1, 2), ae_spec=SPEC, masking=True)
    fed = HybridFederation(tiny, shard_accounts(tiny, 3, 0), cfg)
    fed.setup()
    fed.remove_account_client(3)
    with pytest.raises(ProtocolError, match=r"missing updates from clients \[3\]"):
        fed.run_feature_learning()
    fed.close()


def test_norm_stats_ignore_test_rows(tiny):
    fed, _, joined, _, _ = run_protocol(tiny, m=2, seed=0)
    labels = tiny.labels[tiny.train_idx]
    a, sa = fit_classifier(joined.matrix, labels, "logreg", default_spec("logreg", epochs=2), NoiseSpec(0.01, 1))
    tiny.features[tiny.test_idx] *= 1000.0
    try:
        again = fed.extract_and_join(tiny.train_idx)
        b, sb = fit_classifier(again.matrix, labels, "logreg", default_spec("logreg", epochs=2), NoiseSpec(0.01, 1))
    finally:
        tiny.features[tiny.test_idx] /= 1000.0
    assert a.dumps() == b.dumps()
    np.testing.assert_array_equal(sa.mean, sb.mean)
    fed.close()


def test_noisy_training_is_reproducible(tiny):
    fed, _, joined, _, _ = run_protocol(tiny, m=2, seed=0)
    labels = tiny.labels[tiny.train_idx]
    spec = default_spec("mlp", epochs=2)
    a = fed.train_phase(joined.matrix, labels, "mlp", spec, NoiseSpec(0.01, 5))
    b = fed.train_phase(joined.matrix, labels, "mlp", spec, NoiseSpec(0.01, 5))
    c = fed.train_phase(joined.matrix, labels, "mlp", spec, NoiseSpec(0.0, 5))
    assert a.dumps() == b.dumps() != c.dumps()
    fed.close()


@pytest.mark.parametrize("route", ["server", "p2p"])
@pytest.mark.parametrize("encryption", [True, False])
def test_audit_is_clean(tiny, route, encryption):
    fed, ae, *_ = run_protocol(tiny, m=3, route=route, encryption=encryption, seed=5)
    rep = audit_transcript(fed.transport.transcript, ae.encoder.to_vector(),
                           ae_encode(ae, encode_flags(tiny.flags)), tiny.features)
    if encryption or route == "p2p":
        assert rep.clean, rep
    else:
        # unencrypted replies relayed by the server expose embeddings there
        assert rep.embeddings_at_server and not rep.raw_flags and not rep.encoder_at_tx
    assert rep.frames_scanned == len(fed.transport.transcript)
    fed.close()


def test_audit_flags_planted_leaks(tiny):
    fed, ae, *_ = run_protocol(tiny, m=2, seed=5)
    transcript = list(fed.transport.transcript)
    enc = ae.encoder.to_vector()
    E = ae_encode(ae, encode_flags(tiny.flags))
    bus = fed.transport
    bus.send(SERVER, TX, EmbeddingReply("server", TX, "x", [1], [], plaintext=[[float(enc[3])] * 4]))
    bus.send("ac1", SERVER, EmbeddingReply("ac1", SERVER, "y", [2], [], plaintext=[[float(v) for v in E[2]]]))
    rep = audit_transcript(bus.transcript[len(transcript):], enc, E, tiny.features)
    assert rep.encoder_at_tx and rep.embeddings_at_server
    fed.close()
