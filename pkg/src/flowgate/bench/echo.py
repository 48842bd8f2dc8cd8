"""Sequential echo measurement between two harness endpoints.

The active entity stamps each outgoing datagram with its monotonic clock,
the passive entity echoes the stamp back, and the round-trip time is the
difference at the active side — no clock synchronization between the two is
needed.  Exactly one exchange is in flight at a time: the next send waits
for the echo (or the per-packet timeout) of the previous one, so router or
gateway buffering never overlaps measurements.

Traffic is synthesized as Ethernet/IPv4/UDP frames so the enforcement path
sees realistic, dissectable traffic; in direct mode the same frames travel
straight between the endpoints to measure the bare transport baseline.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from ..frames import udp_frame
from .metrics import RttSample

Address = tuple[str, int]

_PAYLOAD = struct.Struct(">IQ")  # sequence number, send time (ns, monotonic)


@dataclass(frozen=True)
class EndpointProfile:
    """Synthetic identity of one harness endpoint on the protected side."""

    mac: str
    ip: str
    port: int


DEFAULT_ACTIVE = EndpointProfile("02:00:00:00:00:01", "10.0.0.1", 40000)
DEFAULT_PASSIVE = EndpointProfile("02:00:00:00:00:02", "10.0.0.2", 40001)


def build_echo_frame(src: EndpointProfile, dst: EndpointProfile, payload: bytes) -> bytes:
    return udp_frame(src.mac, dst.mac, src.ip, dst.ip, src.port, dst.port, payload)


@dataclass
class BenchmarkResult:
    samples: list[RttSample] = field(default_factory=list)
    timeouts: int = 0
    sent: int = 0
    elapsed_s: float = 0.0
    aborted: bool = False
    sent_frames: list[bytes] = field(default_factory=list)


class PassiveEndpoint:
    """Echoes every delivered frame back with source and destination swapped.

    `echo_to` is the capture socket of this endpoint's enforcement point; in
    direct mode (None) echoes return to the datagram's source address.  Keeps
    delivery counters and, optionally, the delivered frames themselves for
    byte-identity checks; the concurrency high-water mark stays at 1 for a
    sequential sender.
    """

    def __init__(
        self,
        profile: EndpointProfile = DEFAULT_PASSIVE,
        peer: EndpointProfile = DEFAULT_ACTIVE,
        echo_to: Optional[Address] = None,
        sock: Optional[socket.socket] = None,
        record_frames: bool = False,
        echo: bool = True,
    ):
        self.profile = profile
        self.peer = peer
        self.echo_to = echo_to
        self.echo = echo
        self.received = 0
        self.max_in_flight = 0
        self._in_flight = 0
        self.frames: list[bytes] = []
        self._record = record_frames
        self._lock = threading.Lock()
        self._sock = sock or socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        if sock is None:
            self._sock.bind(("127.0.0.1", 0))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, name="bench-passive", daemon=True)

    @property
    def address(self) -> Address:
        return self._sock.getsockname()[:2]

    def start(self) -> "PassiveEndpoint":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._thread.join(timeout=2)

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                frame, source = self._sock.recvfrom(65535)
            except OSError:
                return
            with self._lock:
                self._in_flight += 1
                self.max_in_flight = max(self.max_in_flight, self._in_flight)
                self.received += 1
                if self._record:
                    self.frames.append(frame)
            if self.echo:
                payload = _udp_payload(frame)
                if payload is not None:
                    reply = build_echo_frame(self.profile, self.peer, payload)
                    target = self.echo_to if self.echo_to is not None else source
                    try:
                        self._sock.sendto(reply, target)
                    except OSError:
                        pass
            with self._lock:
                self._in_flight -= 1


def _udp_payload(frame: bytes) -> Optional[bytes]:
    # eth(14) + ipv4(ihl) + udp(8); returns None on anything malformed.
    if len(frame) < 14 + 20 + 8:
        return None
    ihl = (frame[14] & 0x0F) * 4
    offset = 14 + ihl + 8
    if len(frame) < offset:
        return None
    return frame[offset:]


def run_benchmark(
    target: Address,
    n: int,
    local: EndpointProfile = DEFAULT_ACTIVE,
    peer: EndpointProfile = DEFAULT_PASSIVE,
    timeout_ms: int = 1000,
    warmup: int = 0,
    sock: Optional[socket.socket] = None,
    record_frames: bool = False,
) -> BenchmarkResult:
    """Send `n` sequential echo requests to `target` and time the round trips.

    `target` is the capture socket of the active side's enforcement point, or
    the passive endpoint itself in direct mode.  Warm-up exchanges (used to
    let the authorization handshake settle) are not recorded.  Per-packet
    timeouts are counted but excluded from the sample list; a socket failure
    aborts and flags the partial result.
    """
    own = sock or socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    if sock is None:
        own.bind(("127.0.0.1", 0))
    result = BenchmarkResult()
    try:
        loop_start = time.perf_counter()
        for i in range(warmup + n):
            measured = i >= warmup
            seq = i
            send_ns = time.perf_counter_ns()
            frame = build_echo_frame(local, peer, _PAYLOAD.pack(seq, send_ns))
            try:
                own.sendto(frame, target)
            except OSError:
                result.aborted = True
                break
            if measured:
                result.sent += 1
                if record_frames:
                    result.sent_frames.append(frame)
            rtt_ms = _await_echo(own, seq, timeout_ms)
            if rtt_ms is None:
                if measured:
                    result.timeouts += 1
            elif measured:
                result.samples.append(RttSample(len(result.samples), rtt_ms))
        result.elapsed_s = time.perf_counter() - loop_start
    finally:
        if sock is None:
            own.close()
    return result


def _await_echo(own: socket.socket, seq: int, timeout_ms: int) -> Optional[float]:
    """Round-trip ms for `seq`, ignoring stragglers of earlier exchanges."""
    deadline = time.perf_counter_ns() + timeout_ms * 1_000_000
    while True:
        remaining_s = (deadline - time.perf_counter_ns()) / 1e9
        if remaining_s <= 0:
            return None
        own.settimeout(remaining_s)
        try:
            reply, _ = own.recvfrom(65535)
        except socket.timeout:
            return None
        except OSError:
            return None
        payload = _udp_payload(reply)
        if payload is None or len(payload) != _PAYLOAD.size:
            continue
        got_seq, sent_ns = _PAYLOAD.unpack(payload)
        if got_seq != seq:
            continue  # late echo of a timed-out exchange
        return (time.perf_counter_ns() - sent_ns) / 1e6
