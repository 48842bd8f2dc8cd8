"""Stream framing and one-shot control-plane exchanges.

Envelopes on a TCP stream are prefixed with a u32 length; a datagram is one
envelope.  Control messages are small and infrequent, so each exchange opens
a fresh connection — no pooling, no pipelining.
"""

from __future__ import annotations

import socket
import struct
from typing import Optional

from ..errors import TransportError
from .codec import MAX_BODY_LEN
from .messages import ProtocolEnvelope, decode_envelope, encode_envelope

_FRAME_CAP = MAX_BODY_LEN + 1024  # envelope overhead on top of the body cap
DEFAULT_TIMEOUT_S = 5.0

Address = tuple[str, int]


def send_frame(sock: socket.socket, payload: bytes) -> None:
    try:
        sock.sendall(struct.pack(">I", len(payload)) + payload)
    except OSError as exc:
        raise TransportError(f"send failed: {exc}") from None


def recv_frame(sock: socket.socket) -> Optional[bytes]:
    """One length-prefixed frame, or None on orderly EOF at a frame boundary."""
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > _FRAME_CAP:
        raise TransportError(f"frame of {length} bytes exceeds the cap")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise TransportError("connection closed mid-frame")
    return payload


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            raise TransportError("receive timed out") from None
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from None
        if not chunk:
            return None if not buf else None
        buf += chunk
    return buf


def send_envelope(sock: socket.socket, env: ProtocolEnvelope) -> None:
    send_frame(sock, encode_envelope(env))


def recv_envelope(sock: socket.socket) -> Optional[ProtocolEnvelope]:
    payload = recv_frame(sock)
    return decode_envelope(payload) if payload is not None else None


def oneshot(
    addr: Address, env: ProtocolEnvelope, await_reply: bool, timeout_s: float = DEFAULT_TIMEOUT_S
) -> Optional[ProtocolEnvelope]:
    """Connect, send one envelope, optionally wait for one reply, close."""
    try:
        with socket.create_connection(addr, timeout=timeout_s) as sock:
            sock.settimeout(timeout_s)
            send_envelope(sock, env)
            if not await_reply:
                return None
            reply = recv_envelope(sock)
            if reply is None:
                raise TransportError(f"{addr}: connection closed before the reply")
            return reply
    except OSError as exc:
        raise TransportError(f"{addr}: {exc}") from None
