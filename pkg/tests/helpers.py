import numpy as np

from hyfl.data import shard_accounts
from hyfl.federation import FederationConfig, HybridFederation, RoundSchedule
from hyfl.models import TrainSpec, default_spec
from hyfl.privacy import ByteStream, Identity, KeyMaterial, SessionKey
from hyfl.transport.frames import (
    EmbeddingQuery,
    EmbeddingReply,
    Error,
    GlobalModel,
    KeyExchange,
    ModelUpdate,
    PredictReply,
    PredictRequest,
    Register,
)


def mask_keys(m: int, seed: int = 0) -> list[KeyMaterial]:
    """Key material for ``m`` account clients after a complete handshake."""
    names = [f"ac{i}" for i in range(1, m + 1)]
    ids = {n: Identity(n, ByteStream.for_node(seed, n)) for n in names}
    directory = {n: ident.verify_key for n, ident in ids.items()}
    shares = [ident.share() for ident in ids.values()]
    client_ids = {n: i for i, n in enumerate(names, start=1)}
    return [KeyMaterial.derive(ids[n], shares, directory, client_ids, set()) for n in names]


def session_pair(seed: int = 0) -> tuple[SessionKey, SessionKey]:
    """Matching sender/receiver session keys for one Ac->Tx link."""
    a = Identity("ac1", ByteStream.for_node(seed, "ac1"))
    t = Identity("tx", ByteStream.for_node(seed, "tx"))
    directory = {"ac1": a.verify_key, "tx": t.verify_key}
    shares = [a.share(), t.share()]
    ka = KeyMaterial.derive(a, shares, directory, {}, {"tx"})
    kt = KeyMaterial.derive(t, shares, directory, {}, {"ac1"})
    return (SessionKey(ka.session_keys["tx"], ByteStream(b"nonce" + bytes([seed % 256]))),
            SessionKey(kt.session_keys["ac1"]))


def random_message(rng):
    """A random valid protocol message of any type."""
    def text():
        alphabet = "abcxyz019-_|é€ \"\\"
        return "".join(rng.choice(list(alphabet), size=int(rng.integers(0, 12))))

    def floats(n):
        v = rng.normal(0, 10 ** float(rng.integers(-5, 6)), size=n)
        return [float(x) for x in v]

    def ints(n, hi=2 ** 31):
        return [int(x) for x in rng.integers(0, hi, size=n)]

    n = int(rng.integers(0, 20))
    kind = int(rng.integers(0, 9))
    if kind == 0:
        return Register(text(), text(), None if rng.random() < 0.3 else int(rng.integers(0, 1000)))
    if kind == 1:
        shares = [{"node": text(), "public": bytes(rng.bytes(32)).hex(), "signature": bytes(rng.bytes(64)).hex()}
                  for _ in range(int(rng.integers(0, 4)))]
        return KeyExchange(shares, {text(): int(rng.integers(0, 100)) for _ in range(int(rng.integers(0, 4)))})
    if kind == 2:
        if rng.random() < 0.5:
            params = [int(x) for x in rng.integers(0, 2 ** 63, size=n, dtype=np.uint64)]
            return ModelUpdate(int(rng.integers(1, 50)), int(rng.integers(1, 50)), True, params)
        return ModelUpdate(int(rng.integers(1, 50)), int(rng.integers(1, 50)), False, floats(n))
    if kind == 3:
        return GlobalModel(int(rng.integers(1, 50)), bool(rng.random() < 0.5), floats(n))
    if kind == 4:
        return EmbeddingQuery(text(), text(), text(), ints(n))
    if kind == 5:
        if rng.random() < 0.5:
            return EmbeddingReply(text(), text(), text(), ints(n), ints(3), ciphertext=bytes(rng.bytes(n * 8)))
        return EmbeddingReply(text(), text(), text(), ints(n), [], plaintext=[floats(4) for _ in range(n)])
    if kind == 6:
        return PredictRequest(text(), ints(n))
    if kind == 7:
        return PredictReply(text(), ints(n), floats(n), {str(i): text() for i in range(int(rng.integers(0, 3)))})
    return Error(text(), text())


def run_protocol(dataset, m=3, route="server", transport=None, seed=0, kind="logreg", encryption=True,
                 masking=True, rounds=2, interval=2):
    """Full feature learning, join, training and inference on a small federation."""
    cfg = FederationConfig(schedule=RoundSchedule(interval, rounds),
                           ae_spec=TrainSpec(learning_rate=0.05, batch_size=64), masking=masking, encryption=encryption, route=route, seed=seed)
    fed = HybridFederation(dataset, shard_accounts(dataset, m, seed), cfg, transport)
    ae = fed.run_feature_learning()
    joined = fed.extract_and_join(dataset.train_idx)
    clf = fed.train_phase(joined.matrix, dataset.labels[dataset.train_idx[joined.ok]], kind,
                          default_spec(kind, epochs=3, seed=seed))
    inf = fed.infer(dataset.test_idx[:50])
    return fed, ae, joined, clf, inf
