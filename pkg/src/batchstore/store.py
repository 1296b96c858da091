"""Per-target object storage on a local filesystem directory.

On-disk layout is <root>/<bucket>/<objname> with objname path separators
preserved. Writes go to a temp file in the bucket directory and rename into
place, so readers never observe partial objects. Reads are lock-free.
"""

from __future__ import annotations

import logging
import os
import queue
import tarfile
import threading
from pathlib import Path

from batchstore.model import ObjectRef

log = logging.getLogger(__name__)

SOFT_NOT_FOUND = "not_found"
SOFT_BAD_ARCHIVE = "bad_archive"
SOFT_MEMBER_NOT_FOUND = "member_not_found"


class StoreError(Exception):
    """Hard local failure (IO, permissions, unsafe path)."""


class SoftReadError(Exception):
    """Recoverable per-entry failure; `reason` names the soft-error class."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class ObjectStore:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, ref: ObjectRef) -> Path:
        # containment holds by construction: every segment is validated (no
        # "", ".", ".."; ObjectRef already bans leading "/" and control
        # chars) and the store API never creates symlinks inside the root
        parts = ref.bucket.split("/") + ref.objname.split("/")
        if any(p in ("", ".", "..") for p in parts):
            raise StoreError(f"unsafe object path {ref.bucket}/{ref.objname}")
        return self.root.joinpath(*parts)

    def put(self, ref: ObjectRef, content: bytes) -> int:
        """Write-to-temp-then-rename store. Last writer wins."""
        if ref.archpath is not None:
            raise StoreError("put addresses whole objects, not archive members")
        path = self._path(ref)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.parent / f".tmp-{os.getpid()}-{threading.get_ident()}-{path.name}"
            with open(tmp, "wb") as f:
                f.write(content)
            os.replace(tmp, path)
        except OSError as exc:
            raise StoreError(f"put {ref.bucket}/{ref.objname} failed: {exc}") from exc
        return len(content)

    def read(self, ref: ObjectRef) -> bytes:
        """Whole-object bytes, or exact member bytes when archpath is set."""
        path = self._path(ref)
        if ref.archpath is None:
            # raw os calls; this is the hottest loop in the system
            try:
                fd = os.open(path, os.O_RDONLY)
            except FileNotFoundError:
                raise SoftReadError(SOFT_NOT_FOUND, f"{ref.bucket}/{ref.objname}")
            except OSError as exc:
                raise StoreError(f"read failed: {exc}") from exc
            try:
                # put() renames complete temp files, so the opened inode
                # never changes under us and fstat's size is exact
                size = os.fstat(fd).st_size
                if size == 0:
                    return b""
                first = os.read(fd, size)
                if len(first) == size:
                    return first
                chunks = [first]
                got = len(first)
                while got < size:
                    chunk = os.read(fd, size - got)
                    if not chunk:
                        break
                    chunks.append(chunk)
                    got += len(chunk)
                return b"".join(chunks)
            except OSError as exc:
                raise StoreError(f"read failed: {exc}") from exc
            finally:
                os.close(fd)
        return self._read_member(ref, path)

    def _read_member(self, ref: ObjectRef, path: Path) -> bytes:
        # linear scan; stops at the first matching member
        try:
            f = open(path, "rb")
        except FileNotFoundError:
            raise SoftReadError(SOFT_NOT_FOUND, f"{ref.bucket}/{ref.objname}")
        except OSError as exc:
            raise StoreError(f"open shard failed: {exc}") from exc
        with f:
            try:
                with tarfile.open(fileobj=f, mode="r:") as tf:
                    for member in tf:
                        if member.name == ref.archpath and member.isreg():
                            ef = tf.extractfile(member)
                            return ef.read() if ef is not None else b""
            except tarfile.TarError as exc:
                raise SoftReadError(SOFT_BAD_ARCHIVE, str(exc))
            except OSError as exc:
                raise StoreError(f"shard read failed: {exc}") from exc
        raise SoftReadError(SOFT_MEMBER_NOT_FOUND, f"{ref.archpath} in {ref.objname}")

    def exists(self, ref: ObjectRef) -> bool:
        try:
            return self._path(ref).is_file()
        except StoreError:
            return False

    def size(self, ref: ObjectRef) -> int:
        try:
            return self._path(ref).stat().st_size
        except FileNotFoundError:
            raise SoftReadError(SOFT_NOT_FOUND, f"{ref.bucket}/{ref.objname}")


class ReadaheadPool:
    """Best-effort page-cache warmer: K workers sequentially read queued
    objects and discard the bytes. Failures are dropped silently."""

    _CHUNK = 1 << 20

    def __init__(self, store: ObjectStore, workers: int = 4):
        self._store = store
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._closed = threading.Event()
        self._threads = [
            threading.Thread(target=self._run, name=f"readahead-{i}", daemon=True)
            for i in range(max(1, workers))
        ]
        for t in self._threads:
            t.start()

    def enqueue(self, refs) -> None:
        for ref in refs:
            self._queue.put(ref)

    def _run(self) -> None:
        while not self._closed.is_set():
            try:
                ref = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            try:
                with open(self._store._path(ref), "rb") as f:
                    while f.read(self._CHUNK):
                        pass
            except Exception:
                pass  # warming only; never surfaces

    def close(self) -> None:
        self._closed.set()
        for t in self._threads:
            t.join(timeout=1.0)
