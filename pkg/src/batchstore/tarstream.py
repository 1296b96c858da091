"""Incremental TAR serialization of ordered batch results.

Output is POSIX USTAR with PAX extensions and is byte-deterministic: header
metadata is constant (mtime 0, uid/gid 0, mode 0644), so identical
(name, payload) sequences produce identical archives. A PAX extended header
is emitted when an entry name exceeds the 100-byte USTAR field or a payload
reaches 8 GiB, and always for soft-error placeholders, which carry the
record GETBATCH.status=soft-error:<reason> on a zero-length entry.
"""

from __future__ import annotations

BLOCK = 512
MAX_NAME_CHARS = 10_000
USTAR_NAME_MAX = 100
USTAR_SIZE_MAX = 0o77777777777  # 8 GiB - 1, the 11-digit octal ceiling
PAX_STATUS_KEY = "GETBATCH.status"
PAX_ENTRY_NAME = b"././@PaxHeader"

_ZERO_BLOCK = b"\0" * BLOCK


class TarStreamError(RuntimeError):
    """Writer misuse: emit after finalize, double finalize."""


def _octal(value: int, width: int) -> bytes:
    return b"%0*o\0" % (width - 1, value)


def _ustar_header(name: bytes, size: int, typeflag: bytes) -> bytes:
    h = bytearray(BLOCK)
    h[0:len(name)] = name
    h[100:108] = _octal(0o644, 8)        # mode
    h[108:116] = _octal(0, 8)            # uid
    h[116:124] = _octal(0, 8)            # gid
    h[124:136] = _octal(size if size <= USTAR_SIZE_MAX else 0, 12)
    h[136:148] = _octal(0, 12)           # mtime
    h[148:156] = b" " * 8                # chksum placeholder
    h[156:157] = typeflag
    h[257:263] = b"ustar\0"
    h[263:265] = b"00"
    h[329:337] = _octal(0, 8)            # devmajor
    h[337:345] = _octal(0, 8)            # devminor
    chksum = sum(h)
    h[148:156] = b"%06o\0 " % chksum
    return bytes(h)


def _pax_record(key: str, value: str) -> bytes:
    body = f" {key}={value}\n".encode("utf-8")
    # the decimal prefix counts its own digits
    total = len(body) + len(str(len(body)))
    if len(str(total)) != len(str(len(body))):
        total = len(body) + len(str(total))
    return str(total).encode() + body


def _padding(size: int) -> bytes:
    rem = size % BLOCK
    return b"\0" * (BLOCK - rem) if rem else b""


def entry_bytes(name: str, size: int, pax_records: dict[str, str] | None = None) -> bytes:
    """Header blocks (PAX extension included when needed) for one entry.

    Returns everything that precedes the payload; the caller appends the
    payload itself plus zero padding to the next block boundary.
    """
    if len(name) > MAX_NAME_CHARS:
        raise ValueError(f"entry name longer than {MAX_NAME_CHARS} chars")
    encoded = name.encode("utf-8")
    records: dict[str, str] = {}
    if len(encoded) > USTAR_NAME_MAX:
        records["path"] = name
    if size > USTAR_SIZE_MAX:
        records["size"] = str(size)
    if pax_records:
        records.update(pax_records)

    out = bytearray()
    if records:
        pax_data = b"".join(_pax_record(k, v) for k, v in records.items())
        out += _ustar_header(PAX_ENTRY_NAME, len(pax_data), b"x")
        out += pax_data
        out += _padding(len(pax_data))
    out += _ustar_header(encoded[:USTAR_NAME_MAX], size, b"0")
    return bytes(out)


class TarWriter:
    """Single-writer incremental TAR emitter over any .write(bytes) sink."""

    def __init__(self, sink):
        self._sink = sink
        self.bytes_written = 0
        self.finalized = False

    def _write(self, data: bytes) -> None:
        self._sink.write(data)
        self.bytes_written += len(data)

    def _check_open(self) -> None:
        if self.finalized:
            raise TarStreamError("archive already finalized")

    def emit_entry(self, name: str, payload: bytes) -> None:
        """Append one payload entry."""
        self._check_open()
        self._write(entry_bytes(name, len(payload)))
        self._write(payload)
        self._write(_padding(len(payload)))

    def emit_placeholder(self, name: str, reason: str) -> None:
        """Append a zero-length soft-error marker at this position."""
        self._check_open()
        self._write(
            entry_bytes(name, 0, {PAX_STATUS_KEY: f"soft-error:{reason}"})
        )

    def finalize(self) -> int:
        """Terminate the archive; returns total bytes written."""
        self._check_open()
        self._write(_ZERO_BLOCK * 2)
        self.finalized = True
        return self.bytes_written
