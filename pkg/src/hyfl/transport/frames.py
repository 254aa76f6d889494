"""Frame codec and typed protocol messages.

A frame is ``length (4 bytes, big-endian, payload only) || msg_type (1 byte)
|| payload``. Payloads are canonical JSON: UTF-8, keys sorted, no
insignificant whitespace; binary fields travel as base64 strings. Decoding
rejects non-canonical payloads, so encode/decode is a bijection on valid frames.
"""

from __future__ import annotations

import base64
import binascii
import json
import math
import struct
from dataclasses import dataclass, field
from typing import ClassVar

MAX_FRAME = 64 * 1024 * 1024
HEADER = struct.Struct(">IB")


class FrameError(Exception):
    """Raised for any malformed, oversized or unknown frame."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError, ValueError) as exc:
        raise FrameError("invalid base64 field") from exc


# ---------------------------------------------------------------------------
# messages


def _req(doc: dict, key: str, kind):
    if key not in doc:
        raise FrameError(f"missing field {key!r}")
    val = doc[key]
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise FrameError(f"field {key!r} must be a number")
        return val
    if kind is int and isinstance(val, bool):
        raise FrameError(f"field {key!r} must be an integer")
    if not isinstance(val, kind):
        raise FrameError(f"field {key!r} has the wrong type")
    return val


def _int_list(doc, key) -> list[int]:
    vals = _req(doc, key, list)
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in vals):
        raise FrameError(f"field {key!r} must hold integers")
    return vals


def _float_list(doc, key) -> list[float]:
    vals = _req(doc, key, list)
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in vals):
        raise FrameError(f"field {key!r} must hold finite numbers")
    return [float(v) for v in vals]


class Message:
    TYPE: ClassVar[int]

    def to_payload(self) -> dict:
        raise NotImplementedError

    @classmethod
    def from_payload(cls, doc: dict) -> "Message":
        raise NotImplementedError


@dataclass
class Register(Message):
    TYPE: ClassVar[int] = 0x01
    node: str
    role: str
    client_id: int | None = None

    def to_payload(self):
        return {"node": self.node, "role": self.role, "client_id": self.client_id}

    @classmethod
    def from_payload(cls, doc):
        cid = doc.get("client_id")
        if cid is not None and (not isinstance(cid, int) or isinstance(cid, bool)):
            raise FrameError("client_id must be an integer or null")
        return cls(_req(doc, "node", str), _req(doc, "role", str), cid)


@dataclass
class KeyExchange(Message):
    """Signed DH public shares; clients send one, the server broadcasts all plus the roster."""

    TYPE: ClassVar[int] = 0x02
    shares: list[dict]
    roster: dict[str, int] = field(default_factory=dict)

    def to_payload(self):
        return {"shares": self.shares, "roster": self.roster}

    @classmethod
    def from_payload(cls, doc):
        shares = _req(doc, "shares", list)
        for s in shares:
            if not isinstance(s, dict) or not all(isinstance(s.get(k), str) for k in ("node", "public", "signature")):
                raise FrameError("malformed key share")
        roster = _req(doc, "roster", dict)
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in roster.values()):
            raise FrameError("roster values must be integers")
        return cls(shares, roster)


@dataclass
class ModelUpdate(Message):
    """A client's parameters for a round: fixed-point masked integers or plain floats."""

    TYPE: ClassVar[int] = 0x03
    client: int
    round: int
    masked: bool
    params: list

    def to_payload(self):
        return {"client": self.client, "round": self.round, "masked": self.masked, "params": self.params}

    @classmethod
    def from_payload(cls, doc):
        masked = _req(doc, "masked", bool)
        params = _int_list(doc, "params") if masked else _float_list(doc, "params")
        if masked and not all(0 <= v < 2 ** 64 for v in params):
            raise FrameError("masked values must be uint64")
        return cls(_req(doc, "client", int), _req(doc, "round", int), masked, params)


@dataclass
class GlobalModel(Message):
    TYPE: ClassVar[int] = 0x04
    round: int
    final: bool
    params: list[float]

    def to_payload(self):
        return {"round": self.round, "final": self.final, "params": self.params}

    @classmethod
    def from_payload(cls, doc):
        return cls(_req(doc, "round", int), _req(doc, "final", bool), _float_list(doc, "params"))


@dataclass
class EmbeddingQuery(Message):
    TYPE: ClassVar[int] = 0x05
    src: str
    dst: str
    nonce: str
    accounts: list[int]

    def to_payload(self):
        return {"src": self.src, "dst": self.dst, "nonce": self.nonce, "accounts": self.accounts}

    @classmethod
    def from_payload(cls, doc):
        return cls(_req(doc, "src", str), _req(doc, "dst", str), _req(doc, "nonce", str), _int_list(doc, "accounts"))


@dataclass
class EmbeddingReply(Message):
    """Embeddings for ``accounts`` (in that order), sealed unless the run is unencrypted."""

    TYPE: ClassVar[int] = 0x06
    src: str
    dst: str
    nonce: str
    accounts: list[int]
    missing: list[int]
    ciphertext: bytes | None = None
    plaintext: list[list[float]] | None = None

    def to_payload(self):
        doc = {"src": self.src, "dst": self.dst, "nonce": self.nonce, "accounts": self.accounts, "missing": self.missing}
        if self.ciphertext is not None:
            doc["ciphertext"] = b64(self.ciphertext)
        if self.plaintext is not None:
            doc["embeddings"] = self.plaintext
        return doc

    @classmethod
    def from_payload(cls, doc):
        ct = unb64(_req(doc, "ciphertext", str)) if "ciphertext" in doc else None
        pt = None
        if "embeddings" in doc:
            rows = _req(doc, "embeddings", list)
            pt = [_float_list({"r": r}, "r") for r in rows]
        if (ct is None) == (pt is None):
            raise FrameError("reply needs exactly one of ciphertext / embeddings")
        return cls(_req(doc, "src", str), _req(doc, "dst", str), _req(doc, "nonce", str),
                   _int_list(doc, "accounts"), _int_list(doc, "missing"), ct, pt)


@dataclass
class PredictRequest(Message):
    TYPE: ClassVar[int] = 0x07
    request: str
    rows: list[int]

    def to_payload(self):
        return {"request": self.request, "rows": self.rows}

    @classmethod
    def from_payload(cls, doc):
        return cls(_req(doc, "request", str), _int_list(doc, "rows"))


@dataclass
class PredictReply(Message):
    """Scores per requested row; rows that could not be scored appear in ``errors``."""

    TYPE: ClassVar[int] = 0x08
    request: str
    rows: list[int]
    scores: list[float]
    errors: dict[str, str] = field(default_factory=dict)

    def to_payload(self):
        return {"request": self.request, "rows": self.rows, "scores": self.scores, "errors": self.errors}

    @classmethod
    def from_payload(cls, doc):
        errors = _req(doc, "errors", dict)
        if not all(isinstance(v, str) for v in errors.values()):
            raise FrameError("error reasons must be strings")
        rows = _int_list(doc, "rows")
        scores = _float_list(doc, "scores")
        if len(rows) != len(scores):
            raise FrameError("rows and scores differ in length")
        return cls(_req(doc, "request", str), rows, scores, errors)


@dataclass
class Error(Message):
    TYPE: ClassVar[int] = 0x7F
    code: str
    detail: str

    def to_payload(self):
        return {"code": self.code, "detail": self.detail}

    @classmethod
    def from_payload(cls, doc):
        return cls(_req(doc, "code", str), _req(doc, "detail", str))


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.TYPE: cls
    for cls in (Register, KeyExchange, ModelUpdate, GlobalModel, EmbeddingQuery, EmbeddingReply,
                PredictRequest, PredictReply, Error)
}


# ---------------------------------------------------------------------------
# frames


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes

    def encode(self) -> bytes:
        if self.msg_type not in MESSAGE_TYPES:
            raise FrameError(f"unknown msg_type 0x{self.msg_type:02x}")
        if len(self.payload) > MAX_FRAME:
            raise FrameError("frame exceeds 64 MiB")
        return HEADER.pack(len(self.payload), self.msg_type) + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        frame, used = cls.decode_prefix(data)
        if frame is None or used != len(data):
            raise FrameError("trailing or missing bytes")
        return frame

    @classmethod
    def decode_prefix(cls, data: bytes) -> tuple["Frame | None", int]:
        """Decode one frame from the start of ``data``; ``(None, 0)`` if incomplete."""
        if len(data) < HEADER.size:
            return None, 0
        length, msg_type = HEADER.unpack_from(data)
        if length > MAX_FRAME:
            raise FrameError("frame exceeds 64 MiB")
        if msg_type not in MESSAGE_TYPES:
            raise FrameError(f"unknown msg_type 0x{msg_type:02x}")
        end = HEADER.size + length
        if len(data) < end:
            return None, 0
        return cls(msg_type, bytes(data[HEADER.size:end])), end


def encode_message(msg: Message) -> bytes:
    return Frame(msg.TYPE, canonical_json(msg.to_payload())).encode()


def decode_message(frame: Frame | bytes) -> Message:
    if isinstance(frame, (bytes, bytearray)):
        frame = Frame.decode(bytes(frame))
    try:
        doc = json.loads(frame.payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise FrameError("payload is not UTF-8 JSON") from exc
    if not isinstance(doc, dict):
        raise FrameError("payload must be a JSON object")
    try:
        if canonical_json(doc) != frame.payload:
            raise FrameError("payload is not canonical JSON")
    except ValueError as exc:
        raise FrameError("payload holds non-finite numbers") from exc
    return MESSAGE_TYPES[frame.msg_type].from_payload(doc)
