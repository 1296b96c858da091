"""Minimal independent TAR reader used as a test oracle.

Implements only what the tests need: USTAR block walking with checksum
verification, and an optional PAX layer. Kept deliberately separate from
the writer under test.
"""

from dataclasses import dataclass

BLOCK = 512
_ZERO = b"\0" * BLOCK


@dataclass
class RawEntry:
    name: str
    typeflag: str
    size: int
    payload: bytes
    pax_data: bytes | None = None  # raw pax block for 'x' entries


def _field(block: bytes, off: int, length: int) -> bytes:
    return block[off : off + length].split(b"\0", 1)[0]


def _octal(block: bytes, off: int, length: int) -> int:
    raw = _field(block, off, length).strip(b" \0")
    return int(raw, 8) if raw else 0


def read_raw(data: bytes) -> list[RawEntry]:
    """All physical entries (including 'x' headers), checksums verified."""
    if len(data) % BLOCK:
        raise ValueError(f"archive length {len(data)} not a block multiple")
    entries = []
    pos = 0
    while True:
        if pos + BLOCK > len(data):
            raise ValueError("archive ended without terminator")
        block = data[pos : pos + BLOCK]
        if block == _ZERO:
            if data[pos + BLOCK : pos + 2 * BLOCK] != _ZERO:
                raise ValueError("single zero block is not a valid terminator")
            break
        stored = _octal(block, 148, 8)
        computed = sum(block[:148]) + 8 * 0x20 + sum(block[156:])
        if stored != computed:
            raise ValueError(f"checksum mismatch at offset {pos}")
        if block[257:262] != b"ustar":
            raise ValueError("missing ustar magic")
        name = _field(block, 0, 100).decode("utf-8", "surrogateescape")
        size = _octal(block, 124, 12)
        typeflag = chr(block[156])
        payload = data[pos + BLOCK : pos + BLOCK + size]
        if len(payload) != size:
            raise ValueError("truncated payload")
        entries.append(RawEntry(name, typeflag, size, payload))
        pos += BLOCK + ((size + BLOCK - 1) // BLOCK) * BLOCK
    return entries


def _parse_pax(data: bytes) -> dict:
    records = {}
    pos = 0
    while pos < len(data):
        space = data.index(b" ", pos)
        length = int(data[pos:space])
        record = data[pos : pos + length]
        key, value = record[space - pos + 1 : -1].split(b"=", 1)
        records[key.decode()] = value.decode("utf-8")
        pos += length
    return records


@dataclass
class Entry:
    name: str
    size: int
    payload: bytes
    pax: dict


def read_entries(data: bytes) -> list[Entry]:
    """Logical entries with PAX path/size overrides applied."""
    out = []
    pending: dict = {}
    for raw in read_raw(data):
        if raw.typeflag == "x":
            pending = _parse_pax(raw.payload)
            continue
        name = pending.get("path", raw.name)
        size = int(pending.get("size", raw.size))
        out.append(Entry(name, size, raw.payload, pending))
        pending = {}
    return out
