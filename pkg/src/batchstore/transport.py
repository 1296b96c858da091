"""Persistent node-to-node transport for item deliveries and activations.

One long-lived TCP byte stream per (source, destination) pair carries framed
messages for any number of concurrent executions; connections live in a
shared pool, are reused across requests, and are reclaimed after a
configurable idle timeout. Frames are one-way; failures surface to the
sender as TransportError and are soft from the protocol's point of view.

Wire format, little-endian, fixed 35-byte header:

    magic u32 (0x47424154) | exec_id 16B | index u32 | kind u8
    | reason_len u16 | payload_len u64

followed by the UTF-8 reason, then the payload. Kinds: 0 ok delivery,
1 soft-error delivery, 2 activation. Activation payloads are
u16 dt-id length + dt id + the raw request body, so a gateway can broadcast
without ever parsing the body.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass

from batchstore.model import STATUS_OK, STATUS_SOFT_ERROR, exec_id_bytes, exec_id_hex

log = logging.getLogger(__name__)

MAGIC = 0x47424154  # "GBAT"
KIND_OK = 0
KIND_SOFT_ERROR = 1
KIND_ACTIVATION = 2

_HEADER = struct.Struct("<I16sIBHQ")
HEADER_LEN = _HEADER.size
_MAX_PAYLOAD = 1 << 30  # decode sanity cap

# fixed acknowledgment written back by the receiver for activation frames;
# delivery frames stay one-way
ACK_BYTES = struct.pack("<II", MAGIC, 0x004B4341)  # "ACK\0"


class TransportError(Exception):
    """Connect/send/decode failure; callers treat it as a soft error."""


@dataclass(frozen=True)
class DeliveryFrame:
    """One resolved entry travelling sender -> DT."""

    exec_id: str
    index: int
    status: str
    reason: str | None = None
    payload: bytes = b""

    def __post_init__(self):
        if self.status not in (STATUS_OK, STATUS_SOFT_ERROR):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == STATUS_SOFT_ERROR and self.payload:
            raise ValueError("soft-error frame carries a payload")
        if self.status == STATUS_OK and self.reason is not None:
            raise ValueError("ok frame carries a reason")


@dataclass(frozen=True)
class ActivationMessage:
    """Proxy -> sender fan-out naming the DT for a registered execution."""

    exec_id: str
    dt_node: str
    raw_request: bytes


def encode_delivery(frame: DeliveryFrame) -> bytes:
    kind = KIND_OK if frame.status == STATUS_OK else KIND_SOFT_ERROR
    reason = (frame.reason or "").encode("utf-8")
    return (
        _HEADER.pack(
            MAGIC,
            exec_id_bytes(frame.exec_id),
            frame.index,
            kind,
            len(reason),
            len(frame.payload),
        )
        + reason
        + frame.payload
    )


def encode_activation(msg: ActivationMessage) -> bytes:
    dt = msg.dt_node.encode("utf-8")
    payload = struct.pack("<H", len(dt)) + dt + msg.raw_request
    return (
        _HEADER.pack(MAGIC, exec_id_bytes(msg.exec_id), 0, KIND_ACTIVATION, 0, len(payload))
        + payload
    )


def decode_message(data: bytes) -> DeliveryFrame | ActivationMessage:
    """Decode one complete message from a byte string."""
    if len(data) < HEADER_LEN:
        raise TransportError("short message")
    msg, consumed = _decode(data)
    if consumed != len(data):
        raise TransportError("trailing bytes after message")
    return msg


def _decode(data: bytes) -> tuple[DeliveryFrame | ActivationMessage, int]:
    magic, exec_raw, index, kind, reason_len, payload_len = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TransportError(f"bad magic 0x{magic:08x}")
    if payload_len > _MAX_PAYLOAD:
        raise TransportError(f"payload length {payload_len} exceeds cap")
    end = HEADER_LEN + reason_len + payload_len
    if len(data) < end:
        raise TransportError("truncated message")
    reason = data[HEADER_LEN : HEADER_LEN + reason_len].decode("utf-8")
    payload = bytes(data[HEADER_LEN + reason_len : end])
    exec_id = exec_id_hex(exec_raw)
    if kind == KIND_ACTIVATION:
        (dt_len,) = struct.unpack_from("<H", payload)
        dt = payload[2 : 2 + dt_len].decode("utf-8")
        return ActivationMessage(exec_id, dt, payload[2 + dt_len :]), end
    if kind == KIND_OK:
        return DeliveryFrame(exec_id, index, STATUS_OK, None, payload), end
    if kind == KIND_SOFT_ERROR:
        return DeliveryFrame(exec_id, index, STATUS_SOFT_ERROR, reason or "unknown", b""), end
    raise TransportError(f"unknown frame kind {kind}")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return bytes(buf)


def _read_exact(stream, n: int) -> bytes:
    buf = stream.read(n)
    if buf is None or len(buf) < n:
        if not buf:
            raise ConnectionError("peer closed")
        raise ConnectionError("short read from peer")
    return buf


def read_message(sock: socket.socket) -> DeliveryFrame | ActivationMessage:
    """Read one framed message from a blocking socket."""
    return _read_framed(lambda n: _recv_exact(sock, n))


def read_message_stream(stream) -> DeliveryFrame | ActivationMessage:
    """Read one framed message from a buffered binary stream."""
    return _read_framed(lambda n: _read_exact(stream, n))


def _read_framed(read_exact) -> DeliveryFrame | ActivationMessage:
    header = read_exact(HEADER_LEN)
    try:
        return _parse_framed(header, read_exact)
    except (struct.error, ValueError) as exc:
        raise TransportError(f"malformed frame: {exc}") from exc


def _parse_framed(header, read_exact) -> DeliveryFrame | ActivationMessage:
    magic, exec_raw, index, kind, reason_len, payload_len = _HEADER.unpack(header)
    if magic != MAGIC:
        raise TransportError(f"bad magic 0x{magic:08x}")
    if payload_len > _MAX_PAYLOAD:
        raise TransportError(f"payload length {payload_len} exceeds cap")
    reason = read_exact(reason_len).decode("utf-8") if reason_len else ""
    # payload lands in its final bytes object; no reassembly copy
    payload = read_exact(payload_len) if payload_len else b""
    exec_id = exec_id_hex(exec_raw)
    if kind == KIND_ACTIVATION:
        (dt_len,) = struct.unpack_from("<H", payload)
        dt = payload[2 : 2 + dt_len].decode("utf-8")
        return ActivationMessage(exec_id, dt, payload[2 + dt_len :])
    if kind == KIND_OK:
        return DeliveryFrame(exec_id, index, STATUS_OK, None, payload)
    if kind == KIND_SOFT_ERROR:
        return DeliveryFrame(exec_id, index, STATUS_SOFT_ERROR, reason or "unknown", b"")
    raise TransportError(f"unknown frame kind {kind}")


class _Conn:
    __slots__ = ("sock", "wlock", "last_used")

    def __init__(self):
        self.sock: socket.socket | None = None
        self.wlock = threading.Lock()
        self.last_used = time.monotonic()


class PeerConnectionPool:
    """Shared outbound connection pool, at most `max_conns_per_peer` per
    destination; per-connection writes are serialized."""

    def __init__(
        self,
        *,
        idle_timeout: float = 60.0,
        max_conns_per_peer: int = 8,
        connect_timeout: float = 2.0,
    ):
        self.idle_timeout = idle_timeout
        self.max_conns_per_peer = max_conns_per_peer
        self.connect_timeout = connect_timeout
        self._lock = threading.Lock()
        self._conns: dict[str, list[_Conn]] = {}
        self._rr = 0
        self._closed = False

    def send(self, endpoint: str, data: bytes) -> None:
        """Deliver one framed message to `endpoint` ("host:port")."""
        conn, held = self._acquire(endpoint)
        if not held:
            conn.wlock.acquire()
        try:
            if conn.sock is None:
                raise TransportError(f"connection to {endpoint} unavailable")
            conn.sock.sendall(data)
            conn.last_used = time.monotonic()
        except OSError as exc:
            self._discard(endpoint, conn)
            raise TransportError(f"send to {endpoint} failed: {exc}") from exc
        finally:
            conn.wlock.release()

    def send_with_ack(self, endpoint: str, data: bytes, timeout: float) -> None:
        """Send one message and wait for the receiver's fixed ack.

        Detects silently dead pooled connections (a first send into a reset
        socket "succeeds"); callers retry once so a fresh connection is
        established. Only activation traffic uses acks, so the ack read
        never races delivery frames on the same stream.
        """
        conn, held = self._acquire(endpoint)
        if not held:
            conn.wlock.acquire()
        try:
            if conn.sock is None:
                raise TransportError(f"connection to {endpoint} unavailable")
            conn.sock.sendall(data)
            conn.sock.settimeout(timeout)
            try:
                ack = _recv_exact(conn.sock, len(ACK_BYTES))
            finally:
                conn.sock.settimeout(None)
            if ack != ACK_BYTES:
                raise TransportError(f"bad ack from {endpoint}")
            conn.last_used = time.monotonic()
        except (OSError, ConnectionError, TransportError) as exc:
            self._discard(endpoint, conn)
            if isinstance(exc, TransportError):
                raise
            raise TransportError(f"activation to {endpoint} failed: {exc}") from exc
        finally:
            conn.wlock.release()

    @staticmethod
    def _sock_dead(sock: socket.socket) -> bool:
        """Idle pool sockets never have pending inbound data, so anything
        readable (EOF after a peer restart, RST) marks the socket dead."""
        try:
            return len(sock.recv(1, socket.MSG_PEEK | socket.MSG_DONTWAIT)) == 0
        except (BlockingIOError, InterruptedError):
            return False
        except OSError:
            return True

    def _acquire(self, endpoint: str) -> tuple[_Conn, bool]:
        with self._lock:
            if self._closed:
                raise TransportError("pool closed")
            conns = self._conns.setdefault(endpoint, [])
            for c in list(conns):
                if c.sock is not None and not c.wlock.locked():
                    if self._sock_dead(c.sock):
                        conns.remove(c)
                        try:
                            c.sock.close()
                        except OSError:
                            pass
                        c.sock = None
                        continue
                    return c, False
            if len(conns) >= self.max_conns_per_peer:
                self._rr += 1
                return conns[self._rr % len(conns)], False
            # reserve a slot while connecting so the per-peer cap holds
            conn = _Conn()
            conn.wlock.acquire()
            conns.append(conn)
        try:
            host, _, port = endpoint.rpartition(":")
            sock = socket.create_connection((host, int(port)), timeout=self.connect_timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(None)
            conn.sock = sock
        except OSError as exc:
            self._discard(endpoint, conn)
            conn.wlock.release()
            raise TransportError(f"connect to {endpoint} failed: {exc}") from exc
        return conn, True

    def _discard(self, endpoint: str, conn: _Conn) -> None:
        with self._lock:
            conns = self._conns.get(endpoint, [])
            if conn in conns:
                conns.remove(conn)
        if conn.sock is not None:
            try:
                conn.sock.close()
            except OSError:
                pass
            conn.sock = None

    def reclaim_idle(self, now: float | None = None) -> int:
        """Close connections idle longer than `idle_timeout`; returns count."""
        now = time.monotonic() if now is None else now
        victims = []
        with self._lock:
            for endpoint, conns in self._conns.items():
                for c in list(conns):
                    if (
                        c.sock is not None
                        and not c.wlock.locked()
                        and now - c.last_used > self.idle_timeout
                    ):
                        conns.remove(c)
                        victims.append(c)
        for c in victims:
            try:
                c.sock.close()
            except OSError:
                pass
            c.sock = None
        return len(victims)

    def stats(self) -> dict[str, int]:
        with self._lock:
            return {ep: len(conns) for ep, conns in self._conns.items() if conns}

    def close(self) -> None:
        with self._lock:
            self._closed = True
            conns = [c for lst in self._conns.values() for c in lst]
            self._conns.clear()
        for c in conns:
            if c.sock is not None:
                try:
                    c.sock.close()
                except OSError:
                    pass


class PeerServer:
    """Accepts peer connections and dispatches decoded messages to a handler.

    The handler runs on the connection's reader thread and must hand off any
    slow work; a handler exception is logged and drops only that message.
    """

    def __init__(self, host: str, port: int, handler):
        self._handler = handler
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.5)
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None
        self._conns: list[socket.socket] = []
        self._lock = threading.Lock()

    def start(self) -> None:
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="peer-accept", daemon=True
        )
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._conns.append(sock)
            t = threading.Thread(
                target=self._read_loop, args=(sock,), name="peer-read", daemon=True
            )
            t.start()
            self._threads = [x for x in self._threads if x.is_alive()]
            self._threads.append(t)

    def _read_loop(self, sock: socket.socket) -> None:
        stream = sock.makefile("rb", buffering=1 << 18)
        try:
            while not self._stop.is_set():
                msg = read_message_stream(stream)
                try:
                    self._handler(msg)
                except Exception:
                    log.exception("peer message handler failed")
                if isinstance(msg, ActivationMessage):
                    sock.sendall(ACK_BYTES)
        except (ConnectionError, TransportError, OSError, ValueError):
            pass
        finally:
            try:
                sock.close()
            except OSError:
                pass
            with self._lock:
                if sock in self._conns:
                    self._conns.remove(sock)

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)
