"""Authenticated wire protocol: canonical codec, message variants, sealing."""

from .codec import DecodeError, EncodeError
from .messages import MessageType, ProtocolEnvelope, decode_envelope, encode_envelope
from .auth import (
    AuthFailure,
    AuthScheme,
    Authenticator,
    Ed25519Authenticator,
    HmacSha512Authenticator,
    InboundGate,
    NoopAuthenticator,
    ReplayFailure,
    StaleTimestampFailure,
    seal,
)

__all__ = [
    "AuthFailure",
    "AuthScheme",
    "Authenticator",
    "DecodeError",
    "Ed25519Authenticator",
    "EncodeError",
    "HmacSha512Authenticator",
    "InboundGate",
    "MessageType",
    "NoopAuthenticator",
    "ProtocolEnvelope",
    "ReplayFailure",
    "StaleTimestampFailure",
    "decode_envelope",
    "encode_envelope",
    "seal",
]
