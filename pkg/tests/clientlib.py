"""HTTP helpers the integration and acceptance tests drive the cluster with."""

from __future__ import annotations

import json
import socket
import time

import requests




def free_port_pairs(count: int) -> list[int]:
    """Reserve `count` (port, port+1) pairs for node HTTP + peer listeners."""
    ports = []
    held = []
    while len(ports) < count:
        s1 = socket.socket()
        s1.bind(("127.0.0.1", 0))
        port = s1.getsockname()[1]
        try:
            s2 = socket.socket()
            s2.bind(("127.0.0.1", port + 1))
        except OSError:
            s1.close()
            continue
        ports.append(port)
        held += [s1, s2]
    for s in held:
        s.close()
    return ports


def put_object(session, base: str, bucket: str, name: str, data: bytes) -> None:
    r = session.put(f"{base}/v1/objects/{bucket}/{name}", data=data, timeout=30)
    assert r.status_code == 200, f"PUT {bucket}/{name}: {r.status_code} {r.text}"


def get_object(session, base: str, bucket: str, name: str, archpath=None) -> bytes:
    params = {"archpath": archpath} if archpath else None
    r = session.get(f"{base}/v1/objects/{bucket}/{name}", params=params, timeout=30)
    assert r.status_code == 200, f"GET {bucket}/{name}: {r.status_code} {r.text}"
    return r.content


def batch_body(entries, strm=False, coer=False, coloc=None) -> bytes:
    body = {
        "mime": "tar",
        "in": [e if isinstance(e, dict) else e.to_wire() for e in entries],
        "strm": strm,
        "coer": coer,
    }
    if coloc is not None:
        body["coloc"] = coloc
    return json.dumps(body).encode()


def run_batch(session, base: str, entries, strm=False, coer=False, coloc=None, query=None):
    """Issue one batch request, follow the redirect, return the raw TAR bytes."""
    url = f"{base}/v1/batch"
    r = session.request(
        "GET",
        url,
        params=query,
        data=batch_body(entries, strm=strm, coer=coer, coloc=coloc),
        timeout=120,
    )
    if r.status_code >= 400:
        raise requests.HTTPError(
            f"{r.status_code} for {r.url}: {r.text[:300]}", response=r
        )
    assert r.headers.get("Content-Type", "").startswith("application/x-tar"), r.headers
    return r.content


def measure_ttfb(session, base: str, entries, strm: bool, coloc=None, query=None):
    """(ttfb_seconds, total_seconds, body) for one batch, measured on a raw
    socket after the redirect so client-side buffering cannot skew it."""
    t0 = time.monotonic()
    r = session.request(
        "GET",
        f"{base}/v1/batch",
        params=query,
        data=batch_body(entries, strm=strm, coloc=coloc),
        timeout=60,
        allow_redirects=False,
    )
    assert r.status_code == 307, (r.status_code, r.text)
    location = r.headers["Location"]
    hostport, _, path = location.partition("//")[2].partition("/")
    host, _, port = hostport.partition(":")

    sock = socket.create_connection((host, int(port)), timeout=60)
    try:
        sock.sendall(
            f"GET /{path} HTTP/1.1\r\nHost: {hostport}\r\nConnection: close\r\n\r\n".encode()
        )
        buf = bytearray()
        first_body_at = None
        header_end = -1
        while True:
            chunk = sock.recv(1 << 16)
            if not chunk:
                break
            buf += chunk
            if header_end < 0:
                idx = buf.find(b"\r\n\r\n")
                if idx >= 0:
                    header_end = idx + 4
            if header_end >= 0 and first_body_at is None and len(buf) > header_end:
                first_body_at = time.monotonic()
    finally:
        sock.close()
    total_at = time.monotonic()
    if first_body_at is None:
        first_body_at = total_at
    body = _dechunk(bytes(buf[header_end:])) if b"chunked" in bytes(buf[:header_end]).lower() else bytes(buf[header_end:])
    return first_body_at - t0, total_at - t0, body


def _dechunk(data: bytes) -> bytes:
    out = bytearray()
    pos = 0
    while pos < len(data):
        eol = data.find(b"\r\n", pos)
        if eol < 0:
            break
        size = int(data[pos:eol], 16)
        if size == 0:
            break
        out += data[eol + 2 : eol + 2 + size]
        pos = eol + 2 + size + 2
    return bytes(out)


def wait_until(predicate, timeout=10.0, interval=0.02, message="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(interval)
    raise AssertionError(f"timed out waiting for {message}")
