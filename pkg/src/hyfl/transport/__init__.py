from .bus import (
    P2P,
    ROUTE_MODES,
    SERVER_ROUTED,
    InProcessBus,
    Receipt,
    RoundTimeout,
    RouteConfig,
    Stalled,
    TcpTransport,
    TranscriptEntry,
    Transport,
    TransportError,
    UnknownReceiver,
    route_mode,
)
from .frames import (
    MAX_FRAME,
    MESSAGE_TYPES,
    EmbeddingQuery,
    EmbeddingReply,
    Error,
    Frame,
    FrameError,
    GlobalModel,
    KeyExchange,
    Message,
    ModelUpdate,
    PredictReply,
    PredictRequest,
    Register,
    canonical_json,
    decode_message,
    encode_message,
)

__all__ = [
    "EmbeddingQuery",
    "EmbeddingReply",
    "Error",
    "Frame",
    "FrameError",
    "GlobalModel",
    "InProcessBus",
    "KeyExchange",
    "MAX_FRAME",
    "MESSAGE_TYPES",
    "Message",
    "ModelUpdate",
    "P2P",
    "PredictReply",
    "PredictRequest",
    "ROUTE_MODES",
    "Receipt",
    "Register",
    "RoundTimeout",
    "RouteConfig",
    "SERVER_ROUTED",
    "Stalled",
    "TcpTransport",
    "TranscriptEntry",
    "Transport",
    "TransportError",
    "UnknownReceiver",
    "canonical_json",
    "decode_message",
    "encode_message",
    "route_mode",
]
