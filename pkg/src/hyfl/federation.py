"""Hybrid federated protocol: server, account clients and the transaction client.

Account clients train the shared autoencoder under FedAvg-style rounds (masked
aggregation on the server), then answer embedding queries from the
transaction client, which joins sender/receiver embeddings with its own
transaction features to train and serve the classifier. Every interaction is
a message on a :class:`~hyfl.transport.Transport`.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .data import AccountShard, Dataset, N_TX_FEATURES, encode_flags
from .models import Autoencoder, Classifier, SGDState, TrainSpec, ae_encode, ae_train_local
from .models.classifiers import classifier_predict, classifier_train
from .privacy import (
    ByteStream,
    Identity,
    KeyMaterial,
    KeyShare,
    MaskedUpdate,
    MaskingError,
    NoiseSpec,
    NormStats,
    SessionKey,
    add_gaussian_noise,
    mask_update,
    normalize_standard,
    open_embeddings,
    seal_embeddings,
    unmask_sum,
)
from .transport import (
    SERVER_ROUTED,
    EmbeddingQuery,
    EmbeddingReply,
    Error,
    GlobalModel,
    InProcessBus,
    KeyExchange,
    Message,
    ModelUpdate,
    PredictReply,
    PredictRequest,
    Register,
    RouteConfig,
    Stalled,
    Transport,
    TransportError,
    UnknownReceiver,
)

log = logging.getLogger(__name__)

SERVER = "server"
TX = "tx"
ANALYST = "analyst"


def ac_name(client_id: int) -> str:
    return f"ac{client_id}"


class ProtocolError(Exception):
    """A node received a message it cannot accept, or a phase could not complete."""


@dataclass(frozen=True)
class RoundSchedule:
    interval: int = 50
    rounds: int = 1

    def __post_init__(self) -> None:
        if self.interval < 1 or self.rounds < 1:
            raise ValueError("interval and rounds must be >= 1")

    @property
    def total_epochs(self) -> int:
        return self.interval * self.rounds

    @property
    def label(self) -> str:
        return f"I{self.interval}-R{self.rounds}"


@dataclass
class FederationConfig:
    schedule: RoundSchedule = field(default_factory=RoundSchedule)
    ae_spec: TrainSpec = field(default_factory=lambda: TrainSpec(learning_rate=0.01, batch_size=256))
    latent_dim: int = 4
    hidden: int = 8
    masking: bool = True
    encryption: bool = True
    route: str = SERVER_ROUTED
    weighted: bool = False
    seed: int = 0
    timeout: float = 120.0


def aggregate(updates: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of parameter vectors.

    Uses exactly-rounded summation, so the result does not depend on the
    order the updates arrive in.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    stacked = [np.asarray(u, dtype=float) for u in updates]
    dim = stacked[0].shape
    if any(u.shape != dim for u in stacked):
        raise ValueError("update length mismatch")
    cols = np.stack(stacked, axis=1)
    m = len(stacked)
    return np.array([math.fsum(row) / m for row in cols.reshape(-1, m)]).reshape(dim)


def fit_classifier(joined: np.ndarray, labels: np.ndarray, kind: str, spec: TrainSpec | None,
                   noise: NoiseSpec, weights: np.ndarray | None = None) -> tuple[Classifier, NormStats]:
    """Standardize, perturb with training-time noise, then train."""
    Z, stats = normalize_standard(joined)
    Z = add_gaussian_noise(Z, noise)
    return classifier_train(Z, labels, weights, kind, spec), stats


# ---------------------------------------------------------------------------
# nodes


class Node:
    def __init__(self, name: str, transport: Transport, config: FederationConfig, directory: dict[str, bytes]):
        self.name = name
        self.transport = transport
        self.config = config
        self.directory = directory
        self.identity = Identity(name, ByteStream.for_node(config.seed, name))
        self.keys: KeyMaterial | None = None
        self.lock = threading.RLock()

    def send(self, receiver: str, msg: Message):
        return self.transport.send(self.name, receiver, msg)

    def handle(self, sender: str, msg: Message) -> None:
        with self.lock:
            self._dispatch(sender, msg)

    def _dispatch(self, sender: str, msg: Message) -> None:
        raise NotImplementedError

    def announce(self, role: str, client_id: int | None = None) -> None:
        self.send(SERVER, Register(self.name, role, client_id))
        self.send(SERVER, KeyExchange([self.identity.share().to_json()]))

    def _shares(self, msg: KeyExchange) -> list[KeyShare]:
        return [KeyShare.from_json(s) for s in msg.shares]


class ServerNode(Node):
    """Relays key shares and embedding traffic; aggregates masked autoencoder updates."""

    def __init__(self, transport, config, directory, expected: list[str], roster: dict[str, int]):
        super().__init__(SERVER, transport, config, directory)
        self.expected = list(expected)
        self.roster = dict(roster)
        self.registered: dict[str, str] = {}
        self.shares: dict[str, dict] = {}
        self.round = 0
        self.updates: dict[int, ModelUpdate] = {}
        self.global_params: np.ndarray | None = None
        self.finished = False
        self.round_log: list[int] = []

    @property
    def account_clients(self) -> list[str]:
        return sorted(self.roster, key=self.roster.get)

    def begin_training(self, init_params: np.ndarray) -> None:
        with self.lock:
            self.round = 1
            self.finished = False
            self.global_params = np.asarray(init_params, dtype=float)
            self._broadcast(GlobalModel(1, False, [float(v) for v in self.global_params]))

    def _broadcast(self, msg: Message) -> None:
        for name in self.account_clients:
            try:
                self.send(name, msg)
            except UnknownReceiver:
                # a departed client stalls the round barrier, which reports it
                log.warning("server: %s unreachable for %s", name, type(msg).__name__)

    def _dispatch(self, sender, msg):
        if isinstance(msg, Register):
            self.registered[msg.node] = msg.role
        elif isinstance(msg, KeyExchange):
            for s in msg.shares:
                if s["node"] != sender:
                    raise ProtocolError(f"{sender} sent a key share for {s['node']}")
                self.shares[sender] = s
            if set(self.expected) <= set(self.shares):
                bundle = KeyExchange([self.shares[n] for n in sorted(self.shares)], dict(self.roster))
                for name in sorted(self.expected):
                    self.send(name, bundle)
        elif isinstance(msg, ModelUpdate):
            self._on_update(sender, msg)
        elif isinstance(msg, (EmbeddingQuery, EmbeddingReply)):
            self._relay(sender, msg)
        elif isinstance(msg, Error):
            log.warning("server got error from %s: %s %s", sender, msg.code, msg.detail)
        else:
            raise ProtocolError(f"server cannot handle {type(msg).__name__}")

    def _relay(self, sender, msg):
        if self.config.route != SERVER_ROUTED:
            raise ProtocolError("embedding traffic reached the server in P2P mode")
        if msg.src != sender:
            raise ProtocolError("relay source mismatch")
        try:
            self.send(msg.dst, msg)
        except UnknownReceiver:
            if isinstance(msg, EmbeddingQuery):
                self.send(msg.src, Error("unreachable", msg.nonce))
            else:
                raise

    def _on_update(self, sender, msg: ModelUpdate):
        if self.roster.get(sender) != msg.client:
            raise ProtocolError(f"{sender} reported as client {msg.client}")
        if msg.round != self.round:
            raise ProtocolError(f"update for round {msg.round} during round {self.round}")
        if msg.masked != self.config.masking:
            raise ProtocolError("update masking does not match the run configuration")
        if self.updates and len(next(iter(self.updates.values())).params) != len(msg.params):
            raise ProtocolError("update lengths differ within a round")
        self.updates[msg.client] = msg
        if len(self.updates) < len(self.roster):
            return
        self.global_params = self._aggregate()
        self.round_log.append(self.round)
        self.updates = {}
        final = self.round >= self.config.schedule.rounds
        params = [float(v) for v in self.global_params]
        if final:
            self.finished = True
            self._broadcast(GlobalModel(self.round, True, params))
        else:
            self.round += 1
            self._broadcast(GlobalModel(self.round, False, params))

    def _aggregate(self) -> np.ndarray:
        ups = [self.updates[c] for c in sorted(self.updates)]
        m = len(ups)
        if self.config.masking:
            masked = [MaskedUpdate(u.client, u.round, np.array(u.params, dtype=np.uint64)) for u in ups]
            try:
                total = unmask_sum(masked, set(self.roster.values()))
            except MaskingError as exc:
                raise ProtocolError(str(exc)) from exc
            if self.config.weighted:
                return total[:-1] / total[-1]
            return total / m
        vecs = [np.array(u.params, dtype=float) for u in ups]
        if self.config.weighted:
            total = aggregate(vecs) * m
            return total[:-1] / total[-1]
        return aggregate(vecs)


class AccountClientNode(Node):
    """Holds one shard of account flags; raw records never leave this node."""

    def __init__(self, shard: AccountShard, transport, config, directory, template: Autoencoder):
        super().__init__(ac_name(shard.client_id), transport, config, directory)
        self.client_id = shard.client_id
        self._flags = {r.account_id: r.flag for r in shard.records}
        self._X = encode_flags(shard.flags)
        self.model = template.copy()
        self.opt_state: SGDState | None = None
        self.ready = False
        self.sessions: dict[str, SessionKey] = {}
        self.rounds_trained = 0

    @property
    def n_records(self) -> int:
        return len(self._flags)

    def _dispatch(self, sender, msg):
        if isinstance(msg, KeyExchange):
            client_ids = dict(msg.roster)
            self.keys = KeyMaterial.derive(self.identity, self._shares(msg), self.directory, client_ids, {TX})
            self.sessions = {
                peer: SessionKey(k, ByteStream.for_node(self.config.seed, f"{self.name}->{peer}"))
                for peer, k in self.keys.session_keys.items()
            }
        elif isinstance(msg, GlobalModel):
            if sender != SERVER:
                raise ProtocolError("global model from a non-server node")
            self.model.set_vector(np.array(msg.params))
            if msg.final:
                self.ready = True
                return
            self._train_round(msg.round)
        elif isinstance(msg, EmbeddingQuery):
            self._answer(msg)
        elif isinstance(msg, Error):
            log.warning("%s got error: %s %s", self.name, msg.code, msg.detail)
        else:
            raise ProtocolError(f"{self.name} cannot handle {type(msg).__name__}")

    def _train_round(self, round_: int) -> None:
        spec = replace(self.config.ae_spec, epochs=self.config.schedule.interval)
        self.model = ae_train_local(self._X, self.model, spec, self.opt_state, stream=self.client_id - 1)
        self.opt_state = self.model.train_state
        self.rounds_trained += 1
        vec = self.model.to_vector()
        if self.config.weighted:
            vec = np.concatenate([self.n_records * vec, [float(self.n_records)]])
        if self.config.masking:
            if self.keys is None:
                raise ProtocolError("masking requires a completed key exchange")
            mu = mask_update(vec, self.keys, round_)
            params = [int(v) for v in mu.values]
        else:
            params = [float(v) for v in vec]
        self.send(SERVER, ModelUpdate(self.client_id, round_, self.config.masking, params))

    def _answer(self, q: EmbeddingQuery) -> None:
        if q.dst != self.name:
            raise ProtocolError("query addressed to another client")
        found = [a for a in q.accounts if a in self._flags]
        missing = [a for a in q.accounts if a not in self._flags]
        E = ae_encode(self.model, encode_flags([self._flags[a] for a in found])) if found else \
            np.zeros((0, self.model.latent_dim))
        hop = RouteConfig(self.config.route).embedding_hop(self.name, q.src)
        if self.config.encryption:
            aad = f"{q.nonce}|{self.name}|{q.src}".encode()
            ct = seal_embeddings(E, self.sessions[q.src], aad)
            reply = EmbeddingReply(self.name, q.src, q.nonce, found, missing, ciphertext=ct)
        else:
            reply = EmbeddingReply(self.name, q.src, q.nonce, found, missing, plaintext=E.tolist())
        self.send(hop, reply)


@dataclass
class JoinResult:
    rows: np.ndarray
    matrix: np.ndarray  # joined features for rows[ok]
    ok: np.ndarray
    errors: dict[int, str]


@dataclass
class InferenceResult:
    rows: np.ndarray
    scores: np.ndarray  # NaN where the row could not be scored
    labels: np.ndarray  # -1 where the row could not be scored
    errors: dict[int, str]


class TxClientNode(Node):
    """Owns transaction features and labels; trains and serves the classifier."""

    def __init__(self, dataset: Dataset, directory_of_accounts: dict[int, str], transport, config, directory):
        super().__init__(TX, transport, config, directory)
        self._features = dataset.features
        self._sender = dataset.sender
        self._receiver = dataset.receiver
        self._labels = dataset.labels
        self.account_owner = dict(directory_of_accounts)
        self.sessions: dict[str, SessionKey] = {}
        self._nonces = ByteStream.for_node(config.seed, "tx-query")
        self._pending: dict[str, tuple[str, list[int]]] = {}
        self._emb: dict[int, np.ndarray] = {}
        self._failed: dict[int, str] = {}
        self._requests: list[tuple[str, str, np.ndarray]] = []
        self.classifier: Classifier | None = None
        self.norm: NormStats | None = None
        self.latent_dim = config.latent_dim
        self.query_log: list[EmbeddingQuery] = []

    def labels_for(self, rows) -> np.ndarray:
        return self._labels[np.asarray(rows)]

    def tx_features(self, rows) -> np.ndarray:
        return self._features[np.asarray(rows)]

    # -- embedding batches

    def begin_batch(self, rows: np.ndarray) -> None:
        with self.lock:
            if self._pending:
                raise ProtocolError("an embedding batch is already in flight")
            self._emb = {}
            self._failed = {}
            rows = np.asarray(rows)
            accounts = np.unique(np.concatenate([self._sender[rows], self._receiver[rows]]))
            by_owner: dict[str, list[int]] = {}
            for a in accounts.tolist():
                owner = self.account_owner.get(a)
                if owner is None:
                    self._failed[a] = "unknown account"
                else:
                    by_owner.setdefault(owner, []).append(a)
            route = RouteConfig(self.config.route)
            for owner in sorted(by_owner, key=lambda n: int(n[2:])):
                ids = by_owner[owner]
                nonce = self._nonces.read(12).hex()
                q = EmbeddingQuery(TX, owner, nonce, ids)
                self._pending[nonce] = (owner, ids)
                self.query_log.append(q)
                try:
                    self.send(route.embedding_hop(TX, owner), q)
                except UnknownReceiver:
                    self._fail_pending(nonce, "account client unreachable")

    def _fail_pending(self, nonce: str, reason: str) -> None:
        owner, ids = self._pending.pop(nonce)
        for a in ids:
            self._failed[a] = f"{reason} ({owner})"

    @property
    def batch_done(self) -> bool:
        with self.lock:
            return not self._pending

    def join(self, rows: np.ndarray) -> JoinResult:
        """Concatenate sender embedding, receiver embedding and the 7 transaction features."""
        with self.lock:
            rows = np.asarray(rows)
            n = len(rows)
            d = 2 * self.latent_dim + N_TX_FEATURES
            ok = np.ones(n, dtype=bool)
            errors: dict[int, str] = {}
            s_ids = self._sender[rows]
            r_ids = self._receiver[rows]
            for i, (s, r) in enumerate(zip(s_ids.tolist(), r_ids.tolist())):
                for a in (s, r):
                    if a not in self._emb:
                        ok[i] = False
                        errors[int(rows[i])] = f"account {a}: {self._failed.get(a, 'no embedding')}"
                        break
            good = np.flatnonzero(ok)
            M = np.empty((good.size, d))
            if good.size:
                zs = np.stack([self._emb[a] for a in s_ids[good].tolist()])
                zr = np.stack([self._emb[a] for a in r_ids[good].tolist()])
                M[:, :self.latent_dim] = zs
                M[:, self.latent_dim:2 * self.latent_dim] = zr
                M[:, 2 * self.latent_dim:] = self._features[rows[good]]
            return JoinResult(rows, M, ok, errors)

    # -- training and inference

    def train(self, joined: np.ndarray, labels: np.ndarray, kind: str, spec: TrainSpec | None,
              noise: NoiseSpec, weights: np.ndarray | None = None) -> Classifier:
        with self.lock:
            self.classifier, self.norm = fit_classifier(joined, labels, kind, spec, noise, weights)
            return self.classifier

    def score(self, joined: np.ndarray) -> np.ndarray:
        if self.classifier is None or self.norm is None:
            raise ProtocolError("no trained classifier on the transaction client")
        return classifier_predict(self.classifier, self.norm.apply(joined))

    def _dispatch(self, sender, msg):
        if isinstance(msg, KeyExchange):
            client_ids = dict(msg.roster)
            self.keys = KeyMaterial.derive(self.identity, self._shares(msg), self.directory, client_ids,
                                           set(client_ids))
            self.sessions = {peer: SessionKey(k) for peer, k in self.keys.session_keys.items()}
        elif isinstance(msg, EmbeddingReply):
            self._on_reply(msg)
        elif isinstance(msg, Error):
            if msg.code == "unreachable" and msg.detail in self._pending:
                self._fail_pending(msg.detail, "account client unreachable")
                self._maybe_answer()
            else:
                raise ProtocolError(f"error from {sender}: {msg.code} {msg.detail}")
        elif isinstance(msg, PredictRequest):
            self._requests.append((sender, msg.request, np.array(msg.rows, dtype=np.int64)))
            self.begin_batch(np.array(msg.rows, dtype=np.int64))
            self._maybe_answer()
        else:
            raise ProtocolError(f"tx cannot handle {type(msg).__name__}")

    def _on_reply(self, msg: EmbeddingReply) -> None:
        if msg.nonce not in self._pending:
            raise ProtocolError(f"reply with unknown nonce {msg.nonce}")
        owner, ids = self._pending[msg.nonce]
        if msg.src != owner or msg.dst != TX:
            raise ProtocolError("reply does not match its query")
        if msg.ciphertext is not None:
            aad = f"{msg.nonce}|{msg.src}|{TX}".encode()
            E = open_embeddings(msg.ciphertext, self.sessions[msg.src], aad)
        else:
            E = np.array(msg.plaintext, dtype=float).reshape(len(msg.accounts), -1)
        if len(E) != len(msg.accounts):
            raise ProtocolError("embedding count does not match account list")
        for a, e in zip(msg.accounts, E):
            self._emb[a] = e
        for a in msg.missing:
            self._failed[a] = f"unknown to {owner}"
        del self._pending[msg.nonce]
        self._maybe_answer()

    def _maybe_answer(self) -> None:
        if self._pending or not self._requests:
            return
        requester, req_id, rows = self._requests.pop(0)
        res = self.join(rows)
        scores = self.score(res.matrix) if res.matrix.shape[0] else np.zeros(0)
        self.send(requester, PredictReply(req_id, [int(r) for r in rows[res.ok]], [float(s) for s in scores],
                                          {str(k): v for k, v in res.errors.items()}))


# ---------------------------------------------------------------------------
# orchestration


class HybridFederation:
    """Wires the nodes onto a transport and drives the protocol phases."""

    def __init__(self, dataset: Dataset, shards: list[AccountShard], config: FederationConfig | None = None,
                 transport: Transport | None = None, init: Autoencoder | None = None, with_tx: bool = True):
        self.config = config or FederationConfig()
        self.transport = transport if transport is not None else InProcessBus(self.config.seed)
        self.route = RouteConfig(self.config.route)
        self.shards = shards
        self.init = init if init is not None else Autoencoder.init(
            hidden=self.config.hidden, latent_dim=self.config.latent_dim, seed=self.config.seed)
        names = [ac_name(s.client_id) for s in shards]
        roster = {ac_name(s.client_id): s.client_id for s in shards}
        clients = names + ([TX] if with_tx else [])
        # identity keys come from a trusted directory set up before the run
        idents = {n: Identity(n, ByteStream.for_node(self.config.seed, n)).verify_key for n in clients + [SERVER]}
        self.directory = idents
        self.server = ServerNode(self.transport, self.config, idents, clients, roster)
        self.account_clients = {s.client_id: AccountClientNode(s, self.transport, self.config, idents, self.init)
                                for s in shards}
        owner = {r.account_id: ac_name(s.client_id) for s in shards for r in s.records}
        self.tx = TxClientNode(dataset, owner, self.transport, self.config, idents) if with_tx else None
        self.transport.register(SERVER, self.server.handle)
        for node in self.account_clients.values():
            self.transport.register(node.name, node.handle)
        if self.tx is not None:
            self.transport.register(TX, self.tx.handle)
            self.transport.register(ANALYST, self._on_analyst)
        self._replies: dict[str, PredictReply] = {}
        self._req_counter = 0
        self._setup_done = False

    def _on_analyst(self, sender: str, msg: Message) -> None:
        if isinstance(msg, PredictReply):
            self._replies[msg.request] = msg
        else:
            raise ProtocolError(f"analyst cannot handle {type(msg).__name__}")

    def _wait(self, done, what: str) -> None:
        try:
            self.transport.run_until(done, timeout=self.config.timeout, what=what)
        except (Stalled, TransportError) as exc:
            raise ProtocolError(f"protocol aborted: {exc}") from exc

    def _nodes(self):
        return list(self.account_clients.values()) + ([self.tx] if self.tx is not None else [])

    def setup(self) -> None:
        """Registration and the authenticated key exchange."""
        self.route.lock()
        for node in self.account_clients.values():
            node.announce("account", node.client_id)
        if self.tx is not None:
            self.tx.announce("transaction")
        self._wait(lambda: all(n.keys is not None for n in self._nodes()), "key exchange")
        self._setup_done = True

    def run_feature_learning(self) -> Autoencoder:
        if not self._setup_done:
            self.setup()
        self.server.begin_training(self.init.to_vector())

        def done():
            return self.server.finished and all(n.ready for n in self.account_clients.values())

        try:
            self._wait(done, f"autoencoder rounds (schedule {self.config.schedule.label})")
        except ProtocolError as exc:
            missing = sorted(set(self.server.roster.values()) - set(self.server.updates))
            raise ProtocolError(f"{exc}; round {self.server.round} missing updates from clients {missing}") from exc
        return self.init.with_vector(self.server.global_params)

    def extract_and_join(self, rows: np.ndarray) -> JoinResult:
        if self.tx is None:
            raise ProtocolError("federation has no transaction client")
        self.tx.begin_batch(rows)
        self._wait(lambda: self.tx.batch_done, "embedding replies")
        return self.tx.join(rows)

    def train_phase(self, joined: np.ndarray, labels: np.ndarray, kind: str, spec: TrainSpec | None = None,
                    noise: NoiseSpec | None = None, weights: np.ndarray | None = None) -> Classifier:
        return self.tx.train(joined, labels, kind, spec, noise or NoiseSpec(0.0, self.config.seed), weights)

    def infer(self, rows: np.ndarray) -> InferenceResult:
        rows = np.asarray(rows, dtype=np.int64)
        self._req_counter += 1
        req = f"req-{self._req_counter}"
        self.transport.send(ANALYST, TX, PredictRequest(req, [int(r) for r in rows]))
        self._wait(lambda: req in self._replies, "prediction reply")
        reply = self._replies.pop(req)
        scores = np.full(len(rows), np.nan)
        pos = {int(r): i for i, r in enumerate(rows)}
        for r, s in zip(reply.rows, reply.scores):
            scores[pos[r]] = s
        labels = np.where(np.isnan(scores), -1, (scores >= 0.5).astype(np.int64))
        return InferenceResult(rows, scores, labels, {int(k): v for k, v in reply.errors.items()})

    def remove_account_client(self, client_id: int) -> None:
        self.transport.unregister(ac_name(client_id))

    def close(self) -> None:
        self.transport.close()


def run_feature_learning(shards: list[AccountShard], schedule: RoundSchedule, init: Autoencoder,
                         spec: TrainSpec, masking: bool = True, weighted: bool = False, seed: int = 0,
                         transport: Transport | None = None) -> Autoencoder:
    """Federated autoencoder training over ``shards`` without a transaction client."""
    config = FederationConfig(schedule=schedule, ae_spec=spec, latent_dim=init.latent_dim,
                              hidden=init.encoder.weights[0].shape[1],
                              masking=masking, weighted=weighted, seed=seed)
    dummy = Dataset(np.zeros(0, np.int64), np.zeros((0, N_TX_FEATURES)), np.zeros(0, np.int64),
                    np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64),
                    np.zeros(0, np.int64), np.zeros(0, np.int64))
    fed = HybridFederation(dummy, shards, config, transport, init=init, with_tx=False)
    try:
        return fed.run_feature_learning()
    finally:
        fed.close()


def centralized_autoencoder(flags: np.ndarray, init: Autoencoder, spec: TrainSpec) -> Autoencoder:
    """Single-node training on every account; the reference for the federated path."""
    return ae_train_local(encode_flags(flags), init, spec, stream=0)


# ---------------------------------------------------------------------------
# transcript audit

_FROM_ACCOUNT = {Register.TYPE, KeyExchange.TYPE, ModelUpdate.TYPE, EmbeddingReply.TYPE, Error.TYPE}
_NEVER_TO_TX = {ModelUpdate.TYPE, GlobalModel.TYPE}


@dataclass
class IsolationReport:
    raw_flags: list[str] = field(default_factory=list)
    encoder_at_tx: list[str] = field(default_factory=list)
    embeddings_at_server: list[str] = field(default_factory=list)
    features_at_server: list[str] = field(default_factory=list)
    frames_scanned: int = 0

    @property
    def clean(self) -> bool:
        return not (self.raw_flags or self.encoder_at_tx or self.embeddings_at_server or self.features_at_server)


def _walk(doc, keys: list[str], numbers: list[float]) -> None:
    if isinstance(doc, dict):
        for k, v in doc.items():
            keys.append(k)
            _walk(v, keys, numbers)
    elif isinstance(doc, list):
        for v in doc:
            _walk(v, keys, numbers)
    elif isinstance(doc, float):
        numbers.append(doc)


def _fingerprint(values: np.ndarray) -> set[float]:
    # integers and near-zero values collide with counters and padding, so skip them
    v = np.asarray(values, dtype=float).ravel()
    return {float(x) for x in v if abs(x) > 1e-9 and x != round(x)}


def audit_transcript(transcript, encoder_params: np.ndarray, embeddings: np.ndarray,
                     tx_features: np.ndarray, latent_dim: int = 4) -> IsolationReport:
    """Scan every frame for information crossing a role boundary it should not."""

    params = _fingerprint(encoder_params)
    emb = _fingerprint(embeddings)
    emb_bytes = {np.float64(x).tobytes() for x in emb}
    feats = _fingerprint(tx_features)
    rep = IsolationReport()
    for e in transcript:
        rep.frames_scanned += 1
        where = f"#{e.seq} {e.sender}->{e.receiver} type 0x{e.msg_type:02x}"
        doc = json.loads(e.frame[5:].decode("utf-8"))
        keys: list[str] = []
        numbers: list[float] = []
        _walk(doc, keys, numbers)
        if e.sender.startswith("ac"):
            if e.msg_type not in _FROM_ACCOUNT or any("flag" in k for k in keys):
                rep.raw_flags.append(where)
            elif e.msg_type == EmbeddingReply.TYPE and "embeddings" in doc:
                if any(len(r) != latent_dim for r in doc["embeddings"]):
                    rep.raw_flags.append(where)
        if e.receiver == TX:
            if e.msg_type in _NEVER_TO_TX or params.intersection(numbers):
                rep.encoder_at_tx.append(where)
        if e.receiver == SERVER:
            if "embeddings" in doc or emb.intersection(numbers):
                rep.embeddings_at_server.append(where)
            elif "ciphertext" in doc:
                blob = base64.b64decode(doc["ciphertext"])
                if any(blob[i:i + 8] in emb_bytes for i in range(len(blob) - 7)):
                    rep.embeddings_at_server.append(where)
            if e.msg_type == PredictRequest.TYPE or feats.intersection(numbers):
                rep.features_at_server.append(where)
    return rep
