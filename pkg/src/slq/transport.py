"""Framed request/response transport between the two servers.

Frame layout: 4-byte big-endian length (``1 + len(payload)``), 1-byte message
type, payload.  A connection opens with a 17-byte hello from each side:
protocol version and the 16-byte key id.  Replies carry the request type with
the high bit set; anything else aborts the exchange.
"""
from __future__ import annotations

import hashlib
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Protocol

from .paillier import PublicKey
from .wire import Reader, Writer

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_MAX_FRAME = 64 * 1024 * 1024
REPLY = 0x80


class MsgType(IntEnum):
    SIC = 1
    SM = 2
    RELU = 3
    RAND = 4
    SBP_IDS = 5
    SBP_MATCH = 6
    SPE_BOUNDS = 7
    SPE_FILTER = 8
    SLQ_MARK = 9
    RETURN = 10
    FETCH = 11
    ECHO = 12
    QUERY = 32
    BYE = 126
    ERROR = 127


class TransportError(RuntimeError):
    pass


class HandshakeError(TransportError):
    pass


class ProtocolError(TransportError):
    pass


class RemoteError(TransportError):
    pass


def encode_frame(msg_type: int, payload: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    if 1 + len(payload) > max_frame:
        raise ProtocolError(f"frame of {1 + len(payload)} bytes exceeds cap {max_frame}")
    return struct.pack(">IB", 1 + len(payload), msg_type) + payload


def decode_frame(data: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> tuple[int, bytes]:
    if len(data) < 5:
        raise ProtocolError("truncated frame header")
    length, msg_type = struct.unpack_from(">IB", data, 0)
    if length > max_frame:
        raise ProtocolError(f"frame of {length} bytes exceeds cap {max_frame}")
    if length < 1 or len(data) != 4 + length:
        raise ProtocolError("frame length does not match buffer")
    return msg_type, data[5:]


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        part = sock.recv(min(n - len(chunks), 1 << 20))
        if not part:
            raise TransportError("connection closed mid-frame")
        chunks += part
    return bytes(chunks)


def read_frame(sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> tuple[int, bytes]:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > max_frame:
        raise ProtocolError(f"frame of {length} bytes exceeds cap {max_frame}")
    if length < 1:
        raise ProtocolError("empty frame")
    body = _recv_exact(sock, length)
    return body[0], body[1:]


def hello(key_id: bytes) -> bytes:
    return struct.pack(">B", PROTOCOL_VERSION) + key_id


def check_hello(data: bytes, key_id: bytes) -> None:
    if len(data) != 17:
        raise HandshakeError("malformed hello")
    if data[0] != PROTOCOL_VERSION:
        raise HandshakeError(f"protocol version mismatch: peer {data[0]}, local {PROTOCOL_VERSION}")
    if data[1:] != key_id:
        raise HandshakeError(
            f"key id mismatch: peer {data[1:].hex()}, local {key_id.hex()}")


# -- transcript ---------------------------------------------------------------

@dataclass(frozen=True)
class TranscriptEntry:
    direction: str
    msg_type: int
    ct_count: int
    length: int

    def line(self) -> str:
        name = MsgType(self.msg_type & ~REPLY).name
        tag = f"{name}{'_REPLY' if self.msg_type & REPLY else ''}"
        return f"{self.direction} {tag} cts={self.ct_count} bytes={self.length}"


@dataclass
class Transcript:
    entries: list[TranscriptEntry] = field(default_factory=list)
    _hash: "hashlib._Hash" = field(default_factory=hashlib.sha256, repr=False, compare=False)

    def record(self, direction: str, msg_type: int, payload: bytes) -> None:
        ct_count = struct.unpack_from(">I", payload, 0)[0] if len(payload) >= 4 else 0
        self.entries.append(TranscriptEntry(direction, msg_type, ct_count, 5 + len(payload)))
        self._hash.update(struct.pack(">BI", msg_type, len(payload)) + payload)

    def digest(self) -> str:
        """SHA-256 over every recorded frame body, in order."""
        return self._hash.hexdigest()

    def shape(self) -> list[tuple[str, int, int, int]]:
        return [(e.direction, e.msg_type, e.ct_count, e.length) for e in self.entries]

    def dumps(self) -> str:
        return "".join(e.line() + "\n" for e in self.entries)

    def total_bytes(self) -> int:
        return sum(e.length for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


# -- channels -----------------------------------------------------------------

class Handler(Protocol):
    transcript: Transcript

    def handle(self, msg_type: int, payload: bytes) -> tuple[int, bytes]: ...


class Channel(Protocol):
    def exchange(self, frame: bytes) -> bytes: ...

    def close(self) -> None: ...


def serve_frame(handler: Handler, frame: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    """Run one request frame through ``handler``; errors become ERROR frames."""
    try:
        msg_type, payload = decode_frame(frame, max_frame)
        handler.transcript.record("recv", msg_type, payload)
        rtype, rpayload = handler.handle(msg_type, payload)
    except Exception as exc:  # reported to the peer, session aborted there
        log.warning("request failed: %s", exc)
        return encode_frame(MsgType.ERROR, str(exc).encode()[:1024])
    handler.transcript.record("send", rtype, rpayload)
    return encode_frame(rtype, rpayload, max_frame)


class InprocChannel:
    """Both parties in one process; frames still pass through encode/decode."""

    def __init__(self, handler: Handler, max_frame: int = DEFAULT_MAX_FRAME) -> None:
        self.handler = handler
        self.max_frame = max_frame
        self.closed = False

    def exchange(self, frame: bytes) -> bytes:
        if self.closed:
            raise TransportError("channel closed")
        return serve_frame(self.handler, frame, self.max_frame)

    def close(self) -> None:
        self.closed = True


class TcpChannel:
    def __init__(self, sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> None:
        self.sock = sock
        self.max_frame = max_frame

    def exchange(self, frame: bytes) -> bytes:
        self.sock.sendall(frame)
        msg_type, payload = read_frame(self.sock, self.max_frame)
        return struct.pack(">IB", 1 + len(payload), msg_type) + payload

    def close(self) -> None:
        try:
            self.sock.sendall(encode_frame(MsgType.BYE, b""))
        except OSError:
            pass
        self.sock.close()


class Session:
    """Client end of a request/response conversation with the DAP."""

    def __init__(self, channel: Channel, pk: PublicKey, max_frame: int = DEFAULT_MAX_FRAME) -> None:
        self.channel = channel
        self.pk = pk
        self.max_frame = max_frame
        self.transcript = Transcript()
        self.phase: str = "idle"

    def writer(self) -> Writer:
        return Writer(self.pk)

    def request(self, msg_type: int, w: Writer) -> Reader:
        payload = w.payload()
        frame = encode_frame(msg_type, payload, self.max_frame)
        self.transcript.record("send", msg_type, payload)
        rtype, rpayload = decode_frame(self.channel.exchange(frame), self.max_frame)
        if rtype == MsgType.ERROR:
            raise RemoteError(rpayload.decode(errors="replace"))
        if rtype != (msg_type | REPLY):
            raise ProtocolError(f"expected reply to {msg_type}, got type {rtype}")
        self.transcript.record("recv", rtype, rpayload)
        return Reader(self.pk, rpayload)

    def close(self) -> None:
        self.channel.close()

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def session_seed(base: bytes | None, index: int) -> bytes | None:
    if base is None:
        return None
    return hashlib.sha256(base + struct.pack(">Q", index)).digest()


def connect(endpoint: tuple[str, int], pk: PublicKey, timeout: float = 30.0,
            max_frame: int = DEFAULT_MAX_FRAME) -> Session:
    try:
        sock = socket.create_connection(endpoint, timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {endpoint[0]}:{endpoint[1]}: {exc}") from exc
    sock.settimeout(None)
    sock.sendall(hello(pk.key_id))
    try:
        check_hello(_recv_exact(sock, 17), pk.key_id)
    except TransportError:
        sock.close()
        raise
    return Session(TcpChannel(sock, max_frame), pk, max_frame)


def open_session(mode: str, pk: PublicKey, *, handler: Handler | None = None,
                 endpoint: tuple[str, int] | None = None, handler_key_id: bytes | None = None,
                 max_frame: int = DEFAULT_MAX_FRAME) -> Session:
    """Open an ``inproc`` session around ``handler`` or a ``tcp`` one to ``endpoint``."""
    if mode == "inproc":
        if handler is None:
            raise ValueError("inproc sessions need a handler")
        check_hello(hello(handler_key_id if handler_key_id is not None else pk.key_id), pk.key_id)
        return Session(InprocChannel(handler, max_frame), pk, max_frame)
    if mode == "tcp":
        if endpoint is None:
            raise ValueError("tcp sessions need an endpoint")
        return connect(endpoint, pk, max_frame=max_frame)
    raise ValueError(f"unknown transport mode {mode!r}")


# -- server -------------------------------------------------------------------

class FrameServer(socketserver.TCPServer):
    """Serves framed sessions; one fresh handler per connection."""

    allow_reuse_address = True

    def __init__(self, endpoint: tuple[str, int], key_id: bytes,
                 factory: Callable[[int], Handler], threaded: bool = False,
                 max_frame: int = DEFAULT_MAX_FRAME) -> None:
        self.key_id = key_id
        self.factory = factory
        self.max_frame = max_frame
        self.threaded = threaded
        self.sessions = 0
        self.transcripts: list[Transcript] = []
        self._lock = threading.Lock()
        super().__init__(endpoint, _FrameRequestHandler)

    def process_request(self, request, client_address):
        if not self.threaded:
            return super().process_request(request, client_address)
        t = threading.Thread(target=self._threaded, args=(request, client_address), daemon=True)
        t.start()

    def _threaded(self, request, client_address):
        try:
            self.finish_request(request, client_address)
        finally:
            self.shutdown_request(request)

    def next_handler(self) -> Handler:
        with self._lock:
            idx = self.sessions
            self.sessions += 1
        handler = self.factory(idx)
        with self._lock:
            self.transcripts.append(handler.transcript)
        return handler

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]


class _FrameRequestHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: FrameServer = self.server
        sock: socket.socket = self.request
        try:
            peer = _recv_exact(sock, 17)
            sock.sendall(hello(server.key_id))
            check_hello(peer, server.key_id)
        except TransportError as exc:
            log.warning("handshake with %s aborted: %s", self.client_address, exc)
            return
        handler = server.next_handler()
        while True:
            try:
                msg_type, payload = read_frame(sock, server.max_frame)
            except TransportError as exc:
                log.info("session ended: %s", exc)
                return
            if msg_type == MsgType.BYE:
                return
            reply = serve_frame(handler, struct.pack(">IB", 1 + len(payload), msg_type) + payload,
                                server.max_frame)
            try:
                sock.sendall(reply)
            except OSError:
                return
            if reply[4] == MsgType.ERROR:
                return


def start_server(server: FrameServer) -> threading.Thread:
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    return t
