"""Shared HTTP plumbing for proxy and target nodes.

Thin helpers over the stdlib threading HTTP server: JSON responses,
bounded body reads, and explicit chunked streaming (the DT needs to flush
each archive entry as soon as it is emitted).
"""

from __future__ import annotations

import json
import logging
import socket
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

log = logging.getLogger(__name__)


class HttpError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


class NodeHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class ChunkedWriter:
    """Explicit chunked transfer encoding with entry-granular flushing."""

    _AUTOFLUSH = 256 * 1024

    def __init__(self, wfile):
        self._wfile = wfile
        self._buf = bytearray()
        self.bytes_sent = 0

    def write(self, data: bytes) -> None:
        if len(data) >= self._AUTOFLUSH:
            # large payloads go out as their own chunk, uncopied
            self.flush()
            self._wfile.write(b"%x\r\n" % len(data))
            self._wfile.write(data)
            self._wfile.write(b"\r\n")
            self.bytes_sent += len(data)
            return
        self._buf += data
        if len(self._buf) >= self._AUTOFLUSH:
            self.flush()

    def flush(self) -> None:
        if self._buf:
            self._wfile.write(b"%x\r\n" % len(self._buf))
            self._wfile.write(bytes(self._buf))
            self._wfile.write(b"\r\n")
            self.bytes_sent += len(self._buf)
            self._buf.clear()
        self._wfile.flush()

    def close(self) -> None:
        self.flush()
        self._wfile.write(b"0\r\n\r\n")
        self._wfile.flush()


class NodeRequestHandler(BaseHTTPRequestHandler):
    """Routes requests to `self.node.handle_<METHOD>(self, path, query)`."""

    protocol_version = "HTTP/1.1"
    node = None  # set by subclass factory

    def setup(self):
        super().setup()
        self.connection.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    # stdlib logs every request to stderr by default; keep it at debug
    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def address_string(self):  # skip reverse DNS
        return self.client_address[0]

    def _dispatch(self, method: str):
        split = urlsplit(self.path)
        query = {k: v[-1] for k, v in parse_qs(split.query).items()}
        self._body_consumed = False
        try:
            handler = getattr(self.node, f"handle_{method}")
            handler(self, split.path, query)
        except HttpError as exc:
            self.send_json(exc.code, {"error": exc.message})
        except (BrokenPipeError, ConnectionResetError):
            self.close_connection = True
        except Exception:
            log.exception("%s %s failed", method, self.path)
            try:
                self.send_json(500, {"error": "internal error"})
            except OSError:
                self.close_connection = True
        finally:
            self._drain_body()

    def _drain_body(self):
        # a redirected GET re-sends its body; unread bytes would corrupt the
        # next request on this keep-alive connection
        length = int(self.headers.get("Content-Length", 0) or 0)
        if length and not self._body_consumed:
            try:
                self.rfile.read(length)
            except OSError:
                self.close_connection = True

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")

    # -- helpers -------------------------------------------------------------

    def read_body(self, max_bytes: int) -> bytes:
        length = int(self.headers.get("Content-Length", 0) or 0)
        if length > max_bytes:
            raise HttpError(413, f"body exceeds {max_bytes} bytes")
        self._body_consumed = True
        if length == 0:
            return b""
        return self.rfile.read(length)

    def send_json(self, code: int, obj) -> None:
        body = json.dumps(obj).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def send_bytes(self, code: int, body: bytes, content_type="application/octet-stream"):
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def send_redirect(self, location: str) -> None:
        self.send_response(307)
        self.send_header("Location", location)
        self.send_header("Content-Length", "0")
        self.end_headers()

    def start_chunked(self, content_type: str) -> ChunkedWriter:
        self.send_response(200)
        self.send_header("Content-Type", content_type)
        self.send_header("Transfer-Encoding", "chunked")
        self.end_headers()
        return ChunkedWriter(self.wfile)


def make_handler(node) -> type:
    return type("Handler", (NodeRequestHandler,), {"node": node})
