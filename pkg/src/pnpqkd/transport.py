"""Public classical channel: length-prefixed frames over memory or TCP.

Wire format of one frame::

    +----------------+---------+-------------------+
    | length (u32 BE)| type u8 | payload (len - 1) |
    +----------------+---------+-------------------+

``length`` counts the type byte plus the payload.  Any parse error closes
the endpoint (fail-closed); nothing partial is ever delivered.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

import numpy as np

MAX_PAYLOAD = 16 * 1024 * 1024
HEADER = struct.Struct(">IB")


class MessageType(IntEnum):
    BASIS_REVEAL = 0x01
    SAMPLE_INDICES = 0x02
    SAMPLE_BITS = 0x03
    PARITY_QUERY = 0x04
    PARITY_REPLY = 0x05
    HASH_SEED = 0x06
    KEY_HASH = 0x07
    ABORT = 0x08
    SESSION_CONFIG = 0x09


# Carried only on the simulated fibre link, never on the public channel.
QUANTUM_STATES = 0x7E

KEY_DEPENDENT = frozenset({MessageType.SAMPLE_BITS, MessageType.PARITY_REPLY, MessageType.KEY_HASH})


class TransportError(Exception):
    pass


class EndpointClosed(TransportError):
    pass


class OversizeError(TransportError, ValueError):
    pass


class FramingError(TransportError):
    """Malformed or truncated frame; the endpoint is closed."""


class RecvTimeout(TransportError, TimeoutError):
    pass


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise OversizeError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    if not 0 <= int(msg_type) <= 0xFF:
        raise ValueError(f"message type {msg_type} does not fit in one byte")
    return HEADER.pack(len(payload) + 1, int(msg_type)) + bytes(payload)


def _check_header(length: int, msg_type: int, allowed: frozenset[int]) -> None:
    if length == 0:
        raise FramingError("zero-length frame")
    if length - 1 > MAX_PAYLOAD:
        raise FramingError(f"declared payload {length - 1} exceeds {MAX_PAYLOAD}")
    if msg_type not in allowed:
        raise FramingError(f"unknown message type 0x{msg_type:02x}")


def decode_frame(data: bytes, allowed: Iterable[int] = MessageType) -> tuple[int, bytes]:
    """Decode exactly one frame from ``data``."""
    allowed = frozenset(int(t) for t in allowed)
    if len(data) < HEADER.size:
        raise FramingError("truncated header")
    length, msg_type = HEADER.unpack_from(data)
    _check_header(length, msg_type, allowed)
    if len(data) != HEADER.size + length - 1:
        raise FramingError("frame length does not match declared length")
    return msg_type, bytes(data[HEADER.size:])


# -- payload helpers ---------------------------------------------------------

def pack_bits(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    return struct.pack(">I", len(bits)) + np.packbits(bits).tobytes()


def unpack_bits(payload: bytes) -> tuple[np.ndarray, bytes]:
    """Inverse of :func:`pack_bits`; also returns whatever follows the bits."""
    if len(payload) < 4:
        raise FramingError("bit field shorter than its count prefix")
    (n,) = struct.unpack_from(">I", payload)
    nbytes = (n + 7) // 8
    if len(payload) < 4 + nbytes:
        raise FramingError("bit field truncated")
    raw = np.frombuffer(payload, dtype=np.uint8, count=nbytes, offset=4)
    return np.unpackbits(raw, count=n).astype(np.uint8), payload[4 + nbytes:]


def bit_count(payload: bytes) -> int:
    return struct.unpack_from(">I", payload)[0] if len(payload) >= 4 else 0


def pack_u32(values) -> bytes:
    return np.asarray(values, dtype=">u4").tobytes()


def unpack_u32(payload: bytes) -> np.ndarray:
    if len(payload) % 4:
        raise FramingError("u32 array length not a multiple of 4")
    return np.frombuffer(payload, dtype=">u4").astype(np.int64)


# -- endpoints ---------------------------------------------------------------

class Endpoint:
    """One side of a reliable, ordered, duplex message stream."""

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> tuple[int, bytes]:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class MemoryEndpoint(Endpoint):
    def __init__(self, allowed: Iterable[int] = MessageType):
        self._inbox: queue.Queue = queue.Queue()
        self._peer: MemoryEndpoint | None = None
        self._closed = False
        self._allowed = frozenset(int(t) for t in allowed)

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        if self._closed or self._peer is None:
            raise EndpointClosed("endpoint is closed")
        frame = encode_frame(msg_type, payload)
        if self._peer._closed:
            raise EndpointClosed("peer is closed")
        self._peer._inbox.put(frame)

    def inject(self, raw: bytes) -> None:
        """Deliver raw bytes as if the peer had written them (tests only)."""
        self._inbox.put(raw)

    def recv(self, timeout: float | None = None) -> tuple[int, bytes]:
        if self._closed:
            raise EndpointClosed("endpoint is closed")
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise RecvTimeout(f"no frame within {timeout} s") from None
        if item is _CLOSED:
            self._closed = True
            raise EndpointClosed("peer closed the channel")
        try:
            return decode_frame(item, self._allowed)
        except FramingError:
            self.close()
            raise

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        if self._peer is not None:
            self._peer._inbox.put(_CLOSED)


def memory_pair(allowed: Iterable[int] = MessageType) -> tuple[MemoryEndpoint, MemoryEndpoint]:
    a, b = MemoryEndpoint(allowed), MemoryEndpoint(allowed)
    a._peer, b._peer = b, a
    return a, b


class SocketEndpoint(Endpoint):
    def __init__(self, sock: socket.socket, allowed: Iterable[int] = MessageType):
        self._sock = sock
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()
        self._closed = False
        self._allowed = frozenset(int(t) for t in allowed)
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        if self._closed:
            raise EndpointClosed("endpoint is closed")
        frame = encode_frame(msg_type, payload)
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                self.close()
                raise EndpointClosed(str(exc)) from exc

    def _read_exact(self, n: int, started: bool) -> bytes:
        buf = bytearray(n)
        view = memoryview(buf)
        got = 0
        while got < n:
            try:
                k = self._sock.recv_into(view[got:])
            except socket.timeout:
                if not started and got == 0:
                    raise RecvTimeout("no frame before timeout") from None
                self.close()
                raise FramingError("timed out mid-frame") from None
            except OSError as exc:
                self.close()
                raise EndpointClosed(str(exc)) from exc
            if k == 0:
                self.close()
                if not started and got == 0:
                    raise EndpointClosed("peer closed the channel")
                raise FramingError("connection closed mid-frame")
            got += k
            started = True
        return bytes(buf)

    def recv(self, timeout: float | None = None) -> tuple[int, bytes]:
        if self._closed:
            raise EndpointClosed("endpoint is closed")
        with self._recv_lock:
            self._sock.settimeout(timeout)
            header = self._read_exact(HEADER.size, started=False)
            length, msg_type = HEADER.unpack(header)
            try:
                _check_header(length, msg_type, self._allowed)
            except FramingError:
                self.close()
                raise
            payload = self._read_exact(length - 1, started=True) if length > 1 else b""
            return msg_type, payload

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {addr!r}")
    return host, int(port)


def listen(addr: str, count: int = 1, timeout: float | None = 60.0) -> list[socket.socket]:
    """Accept ``count`` connections on ``addr``, in arrival order."""
    host, port = parse_address(addr)
    with socket.create_server((host, port), reuse_port=False) as srv:
        srv.settimeout(timeout)
        return [srv.accept()[0] for _ in range(count)]


def connect(addr: str, timeout: float = 30.0) -> socket.socket:
    import time

    host, port = parse_address(addr)
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            return sock
        except ConnectionRefusedError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


# -- auditing ----------------------------------------------------------------

@dataclass
class AuditedEndpoint(Endpoint):
    """Counts key-dependent bits this side discloses and records a transcript."""

    inner: Endpoint
    sent_bits: dict[int, int] = field(default_factory=dict)
    recv_bits: dict[int, int] = field(default_factory=dict)
    transcript: list[tuple[str, int, bytes]] = field(default_factory=list)

    @staticmethod
    def payload_bits(msg_type: int, payload: bytes) -> int:
        if msg_type in (MessageType.SAMPLE_BITS, MessageType.PARITY_REPLY, MessageType.BASIS_REVEAL):
            return bit_count(payload)
        if msg_type == MessageType.KEY_HASH:
            return 8 * len(payload)
        return 0

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        self.inner.send(msg_type, payload)
        self.transcript.append(("send", int(msg_type), bytes(payload)))
        self.sent_bits[msg_type] = self.sent_bits.get(msg_type, 0) + self.payload_bits(msg_type, payload)

    def recv(self, timeout: float | None = None) -> tuple[int, bytes]:
        msg_type, payload = self.inner.recv(timeout)
        self.transcript.append(("recv", msg_type, payload))
        self.recv_bits[msg_type] = self.recv_bits.get(msg_type, 0) + self.payload_bits(msg_type, payload)
        return msg_type, payload

    def close(self) -> None:
        self.inner.close()

    @property
    def leaked_bits(self) -> int:
        """Key-dependent bits this endpoint has written to the channel."""
        return sum(v for k, v in self.sent_bits.items() if k in KEY_DEPENDENT)

    @property
    def basis_bits(self) -> int:
        return self.sent_bits.get(MessageType.BASIS_REVEAL, 0)
