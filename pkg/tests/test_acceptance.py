"""End-to-end acceptance criteria; each test logs one PASS/FAIL line to the terminal summary.

Slow: the trend criteria run the full pipeline at 100k training rows.
"""

import itertools
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from hyfl.data import GenConfig, encode_flags
from hyfl.experiment import ExperimentConfig, prepare, run_preset
from hyfl.federation import aggregate, audit_transcript
from hyfl.metrics import aucpr
from hyfl.models import Autoencoder, TrainSpec, ae_encode, ae_loss_grad
from hyfl.models.classifiers import _init_network, dense_loss_grad
from hyfl.privacy import IntegrityError, mask_update, open_sealed, seal, unmask_sum
from hyfl.red_team import run_inversion, run_membership
from hyfl.transport import decode_message, encode_message
from helpers import mask_keys, random_message, session_pair
from oracles import aucpr_exact, central_difference, relative_error

pytestmark = pytest.mark.acceptance

TEN_MINUTES = 600.0


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# ---- property suites


def test_c1_federated_degeneracy(acceptance):
    cfg = ExperimentConfig(data=GenConfig(n_train=100_000, seed=1), clients=1, masking=False, seed=1,
                           classifier="gbdt")
    fed = prepare(cfg)
    central = prepare(replace(cfg, mode="centralized"))
    try:
        same_ae = fed.autoencoder.to_vector().tobytes() == central.autoencoder.to_vector().tobytes()
        same_x = fed.train_matrix.tobytes() == central.train_matrix.tobytes()
        a, b = fed.run(), central.run()
    finally:
        fed.close()
        central.close()
    keys = ("precision", "recall", "f1", "aucpr", "n_train", "n_test", "n_failed_rows")
    same_metrics = all(getattr(a, k) == getattr(b, k) for k in keys)
    ok = same_ae and same_x and same_metrics and a.runtime < 120 and b.runtime < 120
    acceptance.record("C1 federated degeneracy", ok,
                      f"autoencoder bit-equal={same_ae}, joined matrix bit-equal={same_x}, "
                      f"AUCPR {a.aucpr:.6f} vs {b.aucpr:.6f}, runtime {a.runtime:.1f}s / {b.runtime:.1f}s")
    assert ok


def test_c2_masked_aggregation(acceptance):
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(100):
        m = int(rng.integers(1, 9))
        dim = int(rng.integers(1, 200))
        keys = mask_keys(m, seed=trial)
        params = [rng.normal(0, 3, size=dim) for _ in range(m)]
        total = unmask_sum([mask_update(p, k, trial + 1) for p, k in zip(params, keys)], set(range(1, m + 1)))
        worst = max(worst, float(np.max(np.abs(total / m - aggregate(params)))))
    # one client's masked update, 1000 rounds: each coordinate should look uniform on [0, 2^64)
    keys = mask_keys(3, seed=99)
    params = np.linspace(-1, 1, 16)
    U = np.array([mask_update(params, keys[0], r).values for r in range(1, 1001)], dtype=np.float64) / 2.0 ** 64
    sigma = np.sqrt(1 / 12 / len(U))
    z = np.abs(U.mean(axis=0) - 0.5) / sigma
    ok = worst <= 1e-5 and z.max() < 4.0
    acceptance.record("C2 masked aggregation", ok,
                      f"max |masked mean - plain mean| {worst:.2e} over 100 trials; "
                      f"max coordinate bias {z.max():.2f} sigma over 1000 masked updates")
    assert ok


def test_c3_gradient_checks(acceptance):
    rng = np.random.default_rng(3)
    worst = {}
    for kind in ("autoencoder", "logreg", "svm", "mlp"):
        errs = []
        while len(errs) < 50:
            seed = int(rng.integers(1 << 30))
            if kind == "autoencoder":
                model = Autoencoder.init(seed=seed)
                X = rng.normal(size=(3, 13))
                theta = model.to_vector()
                g = ae_loss_grad(model, X)[1]
                num = central_difference(lambda t: ae_loss_grad(model.with_vector(t), X, False)[0], theta)
            else:
                X = rng.normal(size=(5, 4))
                y = rng.integers(0, 2, 5).astype(float)
                w = rng.uniform(0.5, 2.0, 5)
                net = _init_network(kind, 4, TrainSpec(hidden=(6, 4), seed=seed))
                theta = rng.normal(size=net.n_params)
                net.set_vector(theta)
                if kind == "svm" and np.any(np.abs(1 - (2 * y - 1) * net.forward(X)[:, 0]) < 1e-3):
                    continue  # the hinge has no derivative at its kink
                g = dense_loss_grad(net, X, y, w, kind, l2=0.01)[1]

                def f(t):
                    net.set_vector(t)
                    return dense_loss_grad(net, X, y, w, kind, l2=0.01, need_grad=False)[0]

                num = central_difference(f, theta)
            errs.append(relative_error(g, num))
        worst[kind] = max(errs)
    ok = all(v < 1e-4 for v in worst.values())
    acceptance.record("C3 gradient checks", ok,
                      ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()) + " (50 instances each)")
    assert ok


def _cases(max_n=8):
    """Every labelling/scoring of up to ``max_n`` points, up to permutation of the points.

    A case is the label sequence in descending-score order plus the sizes of
    the tied score groups along that sequence.
    """
    for n in range(2, max_n + 1):
        for labels in itertools.product((0, 1), repeat=n):
            if 0 < sum(labels) < n:
                for cuts in itertools.product((0, 1), repeat=n - 1):
                    scores, level = [], n
                    for i in range(n):
                        scores.append(level)
                        if i < n - 1 and cuts[i]:
                            level -= 1
                    yield list(scores), list(labels)


def test_c4_aucpr_oracle(acceptance):
    n_cases, worst, exact = 0, 0.0, 0
    for scores, labels in _cases():
        got = aucpr(scores, labels)
        want = aucpr_exact(scores, labels)
        worst = max(worst, abs(got - float(want)))
        exact += got == float(want)
        n_cases += 1
    ok = n_cases >= 10_000 and worst <= 1e-12
    acceptance.record("C4 AUCPR oracle", ok,
                      f"{n_cases} cases up to 8 points, {exact} bit-identical to the rounded exact value, "
                      f"max deviation {worst:.1e}")
    assert ok


def test_c5_role_isolation(acceptance):
    details, ok = [], True
    for route in ("server", "p2p"):
        cfg = ExperimentConfig(data=GenConfig(n_train=4000, n_accounts=400, positive_rate=0.02, seed=5),
                               clients=5, interval=5, rounds=2, route=route, seed=5, noise_variance=0.01)
        pipe = prepare(cfg)
        try:
            pipe.run()
            ds = pipe.dataset
            rep = audit_transcript(pipe.federation.transport.transcript, pipe.autoencoder.encoder.to_vector(),
                                   ae_encode(pipe.autoencoder, encode_flags(ds.flags)), ds.features)
        finally:
            pipe.close()
        ok &= rep.clean and rep.frames_scanned > 0
        details.append(f"{route}: {rep.frames_scanned} frames, raw flags {len(rep.raw_flags)}, encoder at tx "
                       f"{len(rep.encoder_at_tx)}, embeddings at server {len(rep.embeddings_at_server)}")
    acceptance.record("C5 role isolation", ok, "; ".join(details))
    assert ok


def test_c6_codec_and_aead(acceptance):
    rng = np.random.default_rng(6)
    round_trips = 0
    for _ in range(100_000):
        msg = random_message(rng)
        raw = encode_message(msg)
        back = decode_message(raw)
        round_trips += back == msg and encode_message(back) == raw
    send, recv = session_pair(6)
    rejected = accepted = 0
    for _ in range(10_000):
        pt = bytes(rng.bytes(int(rng.integers(0, 200))))
        aad = bytes(rng.bytes(8))
        blob = bytearray(seal(pt, send, aad))
        bit = int(rng.integers(len(blob) * 8))
        blob[bit // 8] ^= 1 << (bit % 8)
        try:
            open_sealed(bytes(blob), recv, aad)
        except IntegrityError:
            rejected += 1
        blob[bit // 8] ^= 1 << (bit % 8)
        accepted += open_sealed(bytes(blob), recv, aad) == pt
    ok = round_trips == 100_000 and rejected == 10_000 and accepted == 10_000
    acceptance.record("C6 codec and AEAD", ok,
                      f"{round_trips}/100000 frame round trips; {rejected}/10000 bit flips rejected; "
                      f"{accepted}/10000 intact ciphertexts opened")
    assert ok


# ---- desk-scale trends (100k training rows)


def _by(rows, *keys):
    return {tuple(r[k] for k in keys): r for r in rows}


def test_c7_classifier_ordering(acceptance):
    rows, secs = _timed(lambda: run_preset("table1", ExperimentConfig(), seeds=(1,)))
    t = _by(rows, "setting", "classifier")
    order = ("gbdt", "mlp", "logreg", "svm")
    held = {}
    for s in ("centralized", "vanilla", "hyfl"):
        vals = [t[(s, k)]["aucpr"] for k in order]
        held[s] = all(a > b for a, b in zip(vals, vals[1:]))
    gap = abs(t[("vanilla", "gbdt")]["aucpr"] - t[("centralized", "gbdt")]["aucpr"])
    ok = all(held.values()) and gap < 0.03 and secs < TEN_MINUTES
    table = "; ".join(f"{s}: " + " ".join(f"{k}={t[(s, k)]['aucpr']:.3f}" for k in order)
                      for s in ("centralized", "vanilla", "hyfl"))
    acceptance.record("C7 classifier ordering", ok,
                      f"{table}; ordering holds {held}; |vanilla-centralized| GBDT {gap:.4f}; {secs:.0f}s")
    assert ok


def test_c8_noise_trend(acceptance):
    rows, secs = _timed(lambda: run_preset("fig4", ExperimentConfig(), seeds=(1, 2, 3)))
    grid = sorted({r["variance"] for r in rows})
    med = {v: {k: statistics.median(r[k] for r in rows if r["variance"] == v) for k in ("aucpr", "avg_l2", "avg_cos")}
           for v in grid}
    auc_ok = med[0.5]["aucpr"] < med[1e-2]["aucpr"] <= med[1e-3]["aucpr"] + 0.02
    cos_ok = all(med[a]["avg_cos"] > med[b]["avg_cos"] for a, b in zip(grid, grid[1:]))
    l2_ok = all(med[a]["avg_l2"] < med[b]["avg_l2"] for a, b in zip(grid, grid[1:]))
    ok = auc_ok and cos_ok and l2_ok and secs < 3 * TEN_MINUTES
    curve = " ".join(f"{v:g}:{med[v]['aucpr']:.3f}" for v in grid)
    acceptance.record("C8 noise trend", ok,
                      f"median AUCPR by variance {curve}; cos decreasing={cos_ok}, l2 increasing={l2_ok}; "
                      f"3 seeds in {secs:.0f}s")
    assert ok


def test_c9_reweighting(acceptance):
    rows, secs = _timed(lambda: run_preset("table2", ExperimentConfig(), seeds=(1,)))
    t = {r["sampling"]: r["aucpr"] for r in rows}
    ok = all(t["reweight"] > t[s] for s in ("under", "over", "smote")) and secs < TEN_MINUTES
    acceptance.record("C9 reweighting vs resampling", ok,
                      " ".join(f"{k}={v:.3f}" for k, v in t.items()) + f"; {secs:.0f}s")
    assert ok


def test_c10_communication_frequency(acceptance):
    rows, secs = _timed(lambda: run_preset("table3", ExperimentConfig(clients=100), seeds=(1,)))
    t = {r["schedule"]: r["aucpr"] for r in rows}
    ok = t["I1-R50"] >= t["I50-R1"] and secs < TEN_MINUTES
    acceptance.record("C10 communication frequency", ok,
                      " ".join(f"{k}={v:.4f}" for k, v in t.items()) + f" at M=100; {secs:.0f}s")
    assert ok


def test_c11_data_size(acceptance):
    rows, secs = _timed(lambda: run_preset("table5", ExperimentConfig(), seeds=(1,)))
    t = {r["fraction"]: r["aucpr"] for r in rows}
    ok = t[1.0] > t[0.1] > t[0.01] and secs < TEN_MINUTES
    acceptance.record("C11 data size", ok,
                      " ".join(f"{k:g}={v:.3f}" for k, v in t.items()) + f"; {secs:.0f}s")
    assert ok


def test_c12_gradient_inversion(acceptance):
    (clean, noisy), secs = _timed(lambda: run_inversion(ExperimentConfig(seed=1), variances=(0.0, 0.1)))
    drop = clean.metrics["input_cos"] - noisy.metrics["input_cos"]
    ok = clean.metrics["objective_cos"] > 0.99 and clean.metrics["input_cos"] > 0.9 and drop >= 0.2
    acceptance.record("C12 gradient inversion", ok,
                      f"no noise: objective {clean.metrics['objective_cos']:.4f}, input cos "
                      f"{clean.metrics['input_cos']:.4f}; update noise 0.1: input cos "
                      f"{noisy.metrics['input_cos']:.4f} (drop {drop:.3f}); 5 samples, {secs:.0f}s")
    assert ok


def test_c13_membership_inference(acceptance):
    aucs = {0.0: [], 0.1: []}
    for seed in (1, 2, 3):
        for rep in run_membership(ExperimentConfig(seed=seed, data=GenConfig(seed=seed))):
            aucs[rep.config["noise_variance"]].append(rep.metrics["auc"])
    clean, noisy = statistics.median(aucs[0.0]), statistics.median(aucs[0.1])
    ok = clean > 0.6 and noisy < clean
    acceptance.record("C13 membership inference", ok,
                      f"median AUC no noise {clean:.4f} {aucs[0.0]}, noise 0.1 {noisy:.4f} {aucs[0.1]}")
    assert ok
