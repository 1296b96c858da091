"""Request/response data model and canonical batch-request serialization.

All types here are immutable value objects; handlers share them freely
across threads.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass

DEFAULT_MAX_BODY_BYTES = 64 * 1024 * 1024

STATUS_OK = "ok"
STATUS_SOFT_ERROR = "soft_error"


class RequestError(ValueError):
    """Base for all batch-request rejection reasons (maps to HTTP 400)."""


class RequestParseError(RequestError):
    """Body is not well-formed JSON."""


class UnsupportedMimeError(RequestError):
    """Requested output format other than tar."""


class RequestValidationError(RequestError):
    """Structurally valid JSON that violates the request contract."""


def _check_name(value: str, what: str, *, allow_empty: bool = False) -> None:
    if not isinstance(value, str):
        raise RequestValidationError(f"{what} must be a string")
    if not value:
        if allow_empty:
            return
        raise RequestValidationError(f"{what} must be non-empty")
    if value.startswith("/"):
        raise RequestValidationError(f"{what} must not start with '/': {value!r}")
    if any(ord(c) < 0x20 or ord(c) == 0x7F for c in value):
        raise RequestValidationError(f"{what} contains control characters")


@dataclass(frozen=True)
class ObjectRef:
    """Address of one retrievable item: an object, or a member of a TAR shard."""

    bucket: str
    objname: str
    archpath: str | None = None

    def __post_init__(self):
        _check_name(self.bucket, "bucket")
        if "/" in self.bucket:
            # flat bucket names keep canonical output names unambiguous
            raise RequestValidationError(f"bucket must not contain '/': {self.bucket!r}")
        _check_name(self.objname, "objname")
        if self.archpath is not None:
            _check_name(self.archpath, "archpath")

    def to_wire(self) -> dict:
        d = {"bucket": self.bucket, "objname": self.objname}
        if self.archpath is not None:
            d["archpath"] = self.archpath
        return d

    @classmethod
    def from_wire(cls, obj: dict) -> "ObjectRef":
        if not isinstance(obj, dict):
            raise RequestValidationError("batch entry must be an object")
        return cls(
            bucket=obj.get("bucket", ""),
            objname=obj.get("objname", ""),
            archpath=obj.get("archpath"),
        )


@dataclass(frozen=True)
class BatchRequest:
    """One batch-retrieval request: output mime, ordered entries, flags."""

    entries: tuple[ObjectRef, ...]
    mime: str = "tar"
    strm: bool = False
    coer: bool = False
    coloc: int | None = None

    def __post_init__(self):
        if self.mime != "tar":
            raise UnsupportedMimeError(f"unsupported mime {self.mime!r}; only 'tar'")
        if not self.entries:
            raise RequestValidationError("batch request has no entries")
        if self.coloc is not None and self.coloc < 0:
            raise RequestValidationError("coloc must be non-negative")


@dataclass(frozen=True)
class BatchItemResult:
    """Resolution of one batch entry: payload bytes or a soft-error marker."""

    index: int
    name: str
    status: str = STATUS_OK
    error_reason: str | None = None
    payload: bytes = b""

    def __post_init__(self):
        if self.status == STATUS_OK:
            if self.error_reason is not None:
                raise ValueError("ok result carries an error reason")
        elif self.status == STATUS_SOFT_ERROR:
            if self.payload:
                raise ValueError("soft_error result carries a payload")
            if not self.error_reason:
                raise ValueError("soft_error result needs a reason")
        else:
            raise ValueError(f"unknown status {self.status!r}")


def new_exec_id() -> str:
    """Fresh 128-bit execution identifier in printable hex form."""
    return uuid.uuid4().hex


def exec_id_bytes(exec_id: str) -> bytes:
    """16-byte wire form of a hex execution id."""
    raw = bytes.fromhex(exec_id)
    if len(raw) != 16:
        raise ValueError(f"execution id must be 128 bits: {exec_id!r}")
    return raw


def exec_id_hex(raw: bytes) -> str:
    if len(raw) != 16:
        raise ValueError("execution id must be 16 bytes")
    return raw.hex()


def parse_batch_request(body: bytes, *, max_bytes: int = DEFAULT_MAX_BODY_BYTES) -> BatchRequest:
    """Parse and validate a JSON batch-request body.

    Unknown top-level keys are ignored; `strm`/`coer` default to false and a
    missing `coloc` stays absent.
    """
    if len(body) > max_bytes:
        raise RequestValidationError(f"request body exceeds {max_bytes} bytes")
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise RequestParseError(f"body is not UTF-8: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RequestParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise RequestValidationError("request body must be a JSON object")

    mime = obj.get("mime", "tar")
    if mime != "tar":
        raise UnsupportedMimeError(f"unsupported mime {mime!r}; only 'tar'")

    raw_entries = obj.get("in")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise RequestValidationError("missing or empty 'in' entry list")
    entries = tuple(ObjectRef.from_wire(e) for e in raw_entries)

    strm = obj.get("strm", False)
    coer = obj.get("coer", False)
    if not isinstance(strm, bool) or not isinstance(coer, bool):
        raise RequestValidationError("'strm'/'coer' must be booleans")
    coloc = obj.get("coloc")
    if coloc is not None and (not isinstance(coloc, int) or isinstance(coloc, bool)):
        raise RequestValidationError("'coloc' must be an integer")

    return BatchRequest(entries=entries, mime=mime, strm=strm, coer=coer, coloc=coloc)


def serialize_batch_request(req: BatchRequest) -> bytes:
    """Canonical wire form; parse(serialize(r)) is structurally equal to r."""
    obj: dict = {
        "mime": req.mime,
        "in": [e.to_wire() for e in req.entries],
        "strm": req.strm,
        "coer": req.coer,
    }
    if req.coloc is not None:
        obj["coloc"] = req.coloc
    return json.dumps(obj, separators=(",", ":")).encode("utf-8")


def canonical_entry_name(ref: ObjectRef) -> str:
    """Deterministic output-archive name for an entry."""
    if ref.archpath is None:
        return f"{ref.bucket}/{ref.objname}"
    return f"{ref.bucket}/{ref.objname}/{ref.archpath}"
