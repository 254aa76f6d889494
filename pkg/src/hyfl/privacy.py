"""Defenses: feature standardization + Gaussian noise, pairwise-masked
aggregation of model updates, authenticated key exchange and AEAD sealing of
embedding payloads.

Wire layouts
------------
* Ciphertext: ``nonce (24 bytes) || tag (16 bytes) || encrypted payload``,
  XChaCha20-Poly1305 (IETF).
* Embedding plaintext: ``rows`` and ``cols`` as little-endian uint32, then the
  row-major matrix as little-endian float64.
* Fixed-point parameters: ``round(x * 2**20)`` as two's-complement
  little-endian 64-bit integers, arithmetic modulo ``2**64``.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from nacl import bindings as sodium
from nacl.exceptions import BadSignatureError, CryptoError
from nacl.signing import SigningKey, VerifyKey

FIXED_POINT_BITS = 20
FIXED_POINT_SCALE = float(1 << FIXED_POINT_BITS)
NONCE_BYTES = sodium.crypto_aead_xchacha20poly1305_ietf_NPUBBYTES
TAG_BYTES = sodium.crypto_aead_xchacha20poly1305_ietf_ABYTES
KEY_BYTES = 32


class IntegrityError(Exception):
    """Ciphertext failed authentication."""


class NonceReuseError(Exception):
    """A nonce was presented twice on one session."""


class MaskingError(Exception):
    """Masked updates cannot be unmasked (e.g. a client is missing)."""


# ---------------------------------------------------------------------------
# standardization and noise


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        centered = X - self.mean
        safe = np.where(self.std > 0, self.std, 1.0)
        return centered / safe

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}


def normalize_standard(X: np.ndarray) -> tuple[np.ndarray, NormStats]:
    """Per-column ``(x - mean) / std`` with population std; constant columns are only centered."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty matrix")
    if X.shape[0] < 2:
        raise ValueError("need at least two rows to standardize")
    if not np.isfinite(X).all():
        raise ValueError("non-finite values")
    stats = NormStats(X.mean(axis=0), X.std(axis=0))
    return stats.apply(X), stats


@dataclass
class NoiseSpec:
    variance: float = 0.0
    seed: int = 0
    mean: float = field(default=0.0, init=False)

    def __post_init__(self) -> None:
        if self.variance < 0:
            raise ValueError("noise variance must be >= 0")


def add_gaussian_noise(X: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Add i.i.d. ``N(0, variance)`` to every entry.

    One stream per call, consumed row-major, so row ``i`` always receives the
    same draws for a given seed and width.
    """
    X = np.asarray(X, dtype=float)
    if not np.isfinite(X).all():
        raise ValueError("non-finite values")
    if spec.variance == 0.0:
        return X.copy()
    noise = np.random.default_rng(spec.seed).standard_normal(X.shape)
    return X + np.sqrt(spec.variance) * noise


def noise_metrics(original: np.ndarray, noisy: np.ndarray) -> dict:
    """Average per-row L2 distance and cosine similarity between two matrices.

    Rows with a zero vector on either side are skipped for the cosine and
    counted in ``skipped_rows``.
    """
    A = np.asarray(original, dtype=float)
    B = np.asarray(noisy, dtype=float)
    if A.shape != B.shape:
        raise ValueError("shape mismatch")
    A = A.reshape(len(A), -1)
    B = B.reshape(len(B), -1)
    l2 = np.linalg.norm(B - A, axis=1)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = (A[ok] * B[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return {
        "avg_l2": float(l2.mean()) if l2.size else 0.0,
        "avg_cos": float(cos.mean()) if cos.size else float("nan"),
        "skipped_rows": int((~ok).sum()),
    }


# ---------------------------------------------------------------------------
# deterministic byte streams (key generation and nonces in seeded simulations)


class ByteStream:
    """SHAKE-256 counter-mode byte generator; ``ByteStream(None)`` reads ``os.urandom``."""

    def __init__(self, seed_material: bytes | None):
        self._seed = seed_material
        self._counter = 0

    @classmethod
    def for_node(cls, seed: int | None, node: str) -> "ByteStream":
        if seed is None:
            return cls(None)
        return cls(b"hyfl-node|" + str(int(seed)).encode() + b"|" + node.encode())

    def read(self, n: int) -> bytes:
        if self._seed is None:
            return os.urandom(n)
        out = hashlib.shake_256(self._seed + self._counter.to_bytes(8, "little")).digest(n)
        self._counter += 1
        return out


def _kdf(secret: bytes, label: str, *context: str) -> bytes:
    ctx = "|".join(context).encode()
    return hashlib.blake2b(label.encode() + b"|" + ctx, key=secret, digest_size=KEY_BYTES).digest()


# ---------------------------------------------------------------------------
# authenticated key exchange


@dataclass(frozen=True)
class KeyShare:
    """Ephemeral X25519 public share signed by the node's long-term Ed25519 identity."""

    node: str
    public: bytes
    signature: bytes

    def to_json(self) -> dict:
        return {"node": self.node, "public": self.public.hex(), "signature": self.signature.hex()}

    @classmethod
    def from_json(cls, doc: dict) -> "KeyShare":
        return cls(doc["node"], bytes.fromhex(doc["public"]), bytes.fromhex(doc["signature"]))


def _share_transcript(node: str, public: bytes) -> bytes:
    return b"hyfl-keyshare|" + node.encode() + b"|" + public


class Identity:
    """A node's long-term signing key plus its per-run ephemeral DH key."""

    def __init__(self, node: str, stream: ByteStream):
        self.node = node
        self.signing = SigningKey(stream.read(32))
        self._dh_secret = stream.read(sodium.crypto_scalarmult_SCALARBYTES)
        self.dh_public = sodium.crypto_scalarmult_base(self._dh_secret)

    @property
    def verify_key(self) -> bytes:
        return bytes(self.signing.verify_key)

    def share(self) -> KeyShare:
        sig = self.signing.sign(_share_transcript(self.node, self.dh_public)).signature
        return KeyShare(self.node, self.dh_public, sig)

    def shared_secret(self, peer: KeyShare, directory: dict[str, bytes]) -> bytes:
        if peer.node not in directory:
            raise IntegrityError(f"no identity on file for {peer.node!r}")
        try:
            VerifyKey(directory[peer.node]).verify(_share_transcript(peer.node, peer.public), peer.signature)
        except BadSignatureError as exc:
            raise IntegrityError(f"bad key-share signature from {peer.node!r}") from exc
        raw = sodium.crypto_scalarmult(self._dh_secret, peer.public)
        a, b = sorted([self.node, peer.node])
        return _kdf(raw, "dh", a, b)


@dataclass
class KeyMaterial:
    """Secrets derived after the handshake; never serialized into messages."""

    node: str
    client_id: int | None = None
    session_keys: dict[str, bytes] = field(default_factory=dict)
    mask_seeds: dict[int, bytes] = field(default_factory=dict)

    @classmethod
    def derive(
        cls,
        identity: Identity,
        shares: list[KeyShare],
        directory: dict[str, bytes],
        client_ids: dict[str, int],
        session_peers: set[str],
    ) -> "KeyMaterial":
        km = cls(identity.node, client_ids.get(identity.node))
        for share in shares:
            if share.node == identity.node:
                continue
            if share.node in session_peers:
                km.session_keys[share.node] = _kdf(identity.shared_secret(share, directory), "aead")
            if km.client_id is not None and share.node in client_ids:
                km.mask_seeds[client_ids[share.node]] = _kdf(identity.shared_secret(share, directory), "mask")
        return km


# ---------------------------------------------------------------------------
# pairwise-masked aggregation


@dataclass
class MaskedUpdate:
    client_id: int
    round: int
    values: np.ndarray  # uint64

    def to_json(self) -> dict:
        return {"client": self.client_id, "round": self.round, "values": [int(v) for v in self.values]}

    @classmethod
    def from_json(cls, doc: dict) -> "MaskedUpdate":
        return cls(int(doc["client"]), int(doc["round"]), np.array(doc["values"], dtype=np.uint64))


def to_fixed_point(params: np.ndarray) -> np.ndarray:
    q = np.round(np.asarray(params, dtype=float) * FIXED_POINT_SCALE)
    if np.any(np.abs(q) >= 2.0 ** 62):
        raise OverflowError("parameter too large for fixed-point encoding")
    return q.astype(np.int64).view(np.uint64)


def from_fixed_point(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.uint64).view(np.int64).astype(float) / FIXED_POINT_SCALE


def pairwise_mask(seed: bytes, round_: int, dim: int) -> np.ndarray:
    stream = hashlib.shake_256(b"hyfl-mask|" + seed + round_.to_bytes(8, "little")).digest(8 * dim)
    return np.frombuffer(stream, dtype="<u8").astype(np.uint64)


def mask_update(params: np.ndarray, key: KeyMaterial, round_: int) -> MaskedUpdate:
    """Fixed-point encode ``params`` and add masks that cancel across all clients.

    Client ``i`` adds ``PRG(s_ij)`` for every peer ``j > i`` and subtracts it
    for ``j < i``.
    """
    if key.client_id is None:
        raise MaskingError("node holds no client id")
    vals = to_fixed_point(params)
    with np.errstate(over="ignore"):
        for peer, seed in sorted(key.mask_seeds.items()):
            m = pairwise_mask(seed, round_, vals.size)
            vals = vals + m if peer > key.client_id else vals - m
    return MaskedUpdate(key.client_id, round_, vals)


def unmask_sum(
    updates: list[MaskedUpdate],
    expected_clients: set[int] | None = None,
    strict: bool = True,
) -> np.ndarray:
    """Sum masked updates modulo ``2**64`` and decode; masks cancel only over the full client set."""
    if not updates:
        raise MaskingError("no updates to aggregate")
    rounds = {u.round for u in updates}
    dims = {u.values.size for u in updates}
    if len(rounds) != 1 or len(dims) != 1:
        raise MaskingError("updates disagree on round or length")
    present = {u.client_id for u in updates}
    if len(present) != len(updates):
        raise MaskingError("duplicate client update")
    if strict and expected_clients is not None and present != set(expected_clients):
        missing = sorted(set(expected_clients) - present)
        raise MaskingError(f"missing masked updates from clients {missing}; masks would not cancel")
    total = np.zeros(dims.pop(), dtype=np.uint64)
    with np.errstate(over="ignore"):
        for u in updates:
            total = total + u.values
    return from_fixed_point(total)


# ---------------------------------------------------------------------------
# AEAD for embeddings


def pack_embeddings(E: np.ndarray) -> bytes:
    E = np.ascontiguousarray(np.asarray(E, dtype="<f8"))
    if E.ndim != 2:
        raise ValueError("embeddings must be 2-D")
    return struct.pack("<II", *E.shape) + E.tobytes()


def unpack_embeddings(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise ValueError("truncated embedding payload")
    rows, cols = struct.unpack("<II", buf[:8])
    if len(buf) != 8 + 8 * rows * cols:
        raise ValueError("embedding payload length mismatch")
    return np.frombuffer(buf[8:], dtype="<f8").reshape(rows, cols).astype(float)


class SessionKey:
    """Symmetric key for one Ac->Tx link with nonce bookkeeping on both ends."""

    def __init__(self, key: bytes, nonces: ByteStream | None = None):
        if len(key) != KEY_BYTES:
            raise ValueError("session key must be 32 bytes")
        self.key = key
        self._nonces = nonces or ByteStream(None)
        self._seen: set[bytes] = set()

    def fresh_nonce(self) -> bytes:
        return self._nonces.read(NONCE_BYTES)


def seal(plaintext: bytes, key: SessionKey, aad: bytes = b"", nonce: bytes | None = None) -> bytes:
    nonce = key.fresh_nonce() if nonce is None else nonce
    if len(nonce) != NONCE_BYTES:
        raise ValueError("nonce must be 24 bytes")
    ct = sodium.crypto_aead_xchacha20poly1305_ietf_encrypt(plaintext, aad or None, nonce, key.key)
    body, tag = ct[:-TAG_BYTES], ct[-TAG_BYTES:]
    return nonce + tag + body


def open_sealed(blob: bytes, key: SessionKey, aad: bytes = b"") -> bytes:
    if len(blob) < NONCE_BYTES + TAG_BYTES:
        raise IntegrityError("ciphertext too short")
    nonce = blob[:NONCE_BYTES]
    tag = blob[NONCE_BYTES:NONCE_BYTES + TAG_BYTES]
    body = blob[NONCE_BYTES + TAG_BYTES:]
    if nonce in key._seen:
        raise NonceReuseError("nonce already used on this session")
    try:
        pt = sodium.crypto_aead_xchacha20poly1305_ietf_decrypt(body + tag, aad or None, nonce, key.key)
    except CryptoError as exc:
        raise IntegrityError("ciphertext failed authentication") from exc
    key._seen.add(nonce)
    return pt


def seal_embeddings(E: np.ndarray, key: SessionKey, aad: bytes = b"") -> bytes:
    return seal(pack_embeddings(E), key, aad)


def open_embeddings(blob: bytes, key: SessionKey, aad: bytes = b"") -> np.ndarray:
    return unpack_embeddings(open_sealed(blob, key, aad))
