"""HTTP client for the batchstore public API.

Speaks only the documented wire formats: JSON batch bodies on
`GET /v1/batch`, the 307 redirect to the designated target, and the
ordered TAR response stream (PAX record `GETBATCH.status` marks soft-error
placeholders). The TAR is parsed incrementally, so peak memory stays
around the largest single item regardless of batch size.
"""

from __future__ import annotations

import json
import tarfile
import warnings
from dataclasses import dataclass
from urllib.parse import quote, urlsplit

import requests

PAX_STATUS_KEY = "GETBATCH.status"


class ClientError(Exception):
    """Base error for batch retrieval failures."""


class RateLimitedError(ClientError):
    """Gateway returned HTTP 429; back off and retry."""

    def __init__(self, message: str, retry_after: float = 1.0):
        super().__init__(message)
        self.retry_after = retry_after


class StreamAbortedError(ClientError):
    """The TAR stream ended before every requested entry arrived."""


class ProtocolError(ClientError):
    """The response was not the documented batch wire format."""


@dataclass(frozen=True)
class ItemInfo:
    index: int
    bucket: str
    objname: str
    archpath: str | None
    is_missing: bool = False
    error_reason: str | None = None


class Client:
    def __init__(self, gateway_url: str, *, timeout: float = 120.0):
        parts = urlsplit(gateway_url)
        if parts.scheme not in ("http", "https") or not parts.netloc:
            raise ValueError(f"gateway URL must be http(s)://host[:port], got {gateway_url!r}")
        self._base = f"{parts.scheme}://{parts.netloc}"
        self._timeout = timeout
        self._session = requests.Session()

    def bucket(self, name: str) -> "BucketHandle":
        if not name:
            raise ValueError("bucket name must be non-empty")
        return BucketHandle(self, name)

    def batch(
        self,
        objnames,
        bucket,
        archpaths=None,
        strm: bool = True,
        coer: bool = False,
        coloc: bool = False,
    ) -> "BatchHandle":
        """One retrieval of many entries; results come back in this order."""
        names = list(objnames)
        if not names:
            raise ValueError("batch needs at least one object name")
        bucket_name = bucket.name if isinstance(bucket, BucketHandle) else bucket
        if not bucket_name:
            raise ValueError("bucket name must be non-empty")
        paths = list(archpaths) if archpaths is not None else [None] * len(names)
        if len(paths) != len(names):
            raise ValueError("archpaths must align with objnames")
        entries = [
            ItemInfo(i, bucket_name, name, path)
            for i, (name, path) in enumerate(zip(names, paths))
        ]
        return BatchHandle(self, entries, strm=strm, coer=coer, coloc=coloc)

    # -- single-object convenience (the per-object GET path) -------------------

    def put_object(self, bucket: str, objname: str, data: bytes) -> int:
        r = self._session.put(
            f"{self._base}/v1/objects/{quote(bucket)}/{quote(objname)}",
            data=data,
            timeout=self._timeout,
        )
        self._raise_for_status(r)
        return r.json()["size"]

    def get_object(self, bucket: str, objname: str, archpath: str | None = None) -> bytes:
        params = {"archpath": archpath} if archpath else None
        r = self._session.get(
            f"{self._base}/v1/objects/{quote(bucket)}/{quote(objname)}",
            params=params,
            timeout=self._timeout,
        )
        self._raise_for_status(r)
        return r.content

    @staticmethod
    def _raise_for_status(r) -> None:
        if r.status_code == 429:
            raise RateLimitedError(f"rate limited: {r.text[:200]}")
        if r.status_code >= 400:
            raise ClientError(f"{r.status_code}: {r.text[:200]}")

    def close(self) -> None:
        self._session.close()


class BucketHandle:
    """Bucket-scoped view of a client; handles are interchangeable."""

    def __init__(self, client: Client, name: str):
        self._client = client
        self.name = name

    def put(self, objname: str, data: bytes) -> int:
        return self._client.put_object(self.name, objname, data)

    def get(self, objname: str, archpath: str | None = None) -> bytes:
        return self._client.get_object(self.name, objname, archpath)

    def batch(self, objnames, **kwargs) -> "BatchHandle":
        return self._client.batch(objnames, self, **kwargs)

    def __eq__(self, other):
        return isinstance(other, BucketHandle) and other.name == self.name


class BatchHandle:
    """One batch request; `get()` yields (ItemInfo, bytes) in request order."""

    def __init__(self, client: Client, entries, *, strm: bool, coer: bool, coloc: bool):
        self._client = client
        self._entries = entries
        self._strm = strm
        self._coer = coer
        self._coloc = coloc

    def _body(self) -> bytes:
        doc = {
            "mime": "tar",
            "in": [
                {"bucket": e.bucket, "objname": e.objname}
                | ({"archpath": e.archpath} if e.archpath is not None else {})
                for e in self._entries
            ],
            "strm": self._strm,
            "coer": self._coer,
        }
        if self._coloc:
            doc["coloc"] = 1
        return json.dumps(doc).encode()

    def get(self):
        """Iterate the ordered batch results. Single consumer."""
        params = {"coloc": "1"} if self._coloc else None
        r = self._client._session.request(
            "GET",
            f"{self._client._base}/v1/batch",
            params=params,
            data=self._body(),
            stream=True,
            timeout=self._client._timeout,
        )
        if r.status_code == 429:
            raise RateLimitedError(f"rate limited: {r.text[:200]}")
        if r.status_code >= 400:
            raise ClientError(f"batch rejected with {r.status_code}: {r.text[:200]}")
        content_type = r.headers.get("Content-Type", "")
        if not content_type.startswith("application/x-tar"):
            raise ProtocolError(f"expected a tar stream, got {content_type!r}")
        return self._iterate(r)

    def _iterate(self, response):
        expected = len(self._entries)
        yielded = 0
        try:
            with tarfile.open(fileobj=response.raw, mode="r|") as archive:
                for member in archive:
                    if yielded >= expected:
                        raise ProtocolError("more archive entries than requested")
                    entry = self._entries[yielded]
                    reader = archive.extractfile(member)
                    content = reader.read() if reader is not None else b""
                    info = self._classify(entry, member, content)
                    yielded += 1
                    yield info, content
        except tarfile.TarError as exc:
            raise StreamAbortedError(f"batch stream aborted mid-transfer: {exc}") from exc
        finally:
            response.close()
        if yielded != expected:
            raise StreamAbortedError(
                f"batch stream ended after {yielded} of {expected} entries"
            )

    @staticmethod
    def _classify(entry: ItemInfo, member, content: bytes) -> ItemInfo:
        status = member.pax_headers.get(PAX_STATUS_KEY)
        if status is not None:
            reason = status.removeprefix("soft-error:")
            return ItemInfo(
                entry.index, entry.bucket, entry.objname, entry.archpath,
                is_missing=True, error_reason=reason,
            )
        if len(content) == 0:
            warnings.warn(
                f"zero-length batch entry {member.name!r} carries no status "
                "record; flagging it missing (it may be a legitimately empty "
                "object)",
                stacklevel=3,
            )
            return ItemInfo(
                entry.index, entry.bucket, entry.objname, entry.archpath,
                is_missing=True, error_reason=None,
            )
        return entry
