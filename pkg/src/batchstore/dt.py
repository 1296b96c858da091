"""Designated-target engine: per-request registration, ordered reassembly,
streaming emission, timeout-driven recovery, and soft-error accounting.

Every accepted request gets an ExecutionState holding a reorder buffer:
results arrive out of order from local reads, remote sender frames, and
recovery pulls, all funnelling through one `_record` path, while the emit
cursor only ever moves forward through contiguously available indices.
A node runs one DtEngine regardless of how many requests it coordinates,
and the same node may simultaneously act as a sender for other requests.
"""

from __future__ import annotations

import io
import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor

from batchstore.admission import (
    DECISION_REJECT,
    DECISION_THROTTLE,
    MetricsRegistry,
    PressureSource,
    admit,
)
from batchstore.config import TuningConfig
from batchstore.model import (
    STATUS_OK,
    STATUS_SOFT_ERROR,
    BatchItemResult,
    BatchRequest,
    canonical_entry_name,
    new_exec_id,
)
from batchstore.placement import owners_of
from batchstore.store import ObjectStore, SoftReadError, StoreError
from batchstore.tarstream import TarWriter
from batchstore.transport import DeliveryFrame

log = logging.getLogger(__name__)

SOFT_TIMEOUT = "timeout"
READAHEAD_MIN_SLICE = 64


class AdmissionRejected(Exception):
    """Registration refused under memory pressure; maps to HTTP 429."""


class UnknownExecution(KeyError):
    pass


class AlreadyConsumed(RuntimeError):
    """A second client tried to attach to an execution's output stream."""


class ExecutionAborted(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


STATE_LIVE = "live"
STATE_ABORTED = "aborted"


class ExecutionState:
    """Book-keeping for one live request on its DT. All mutation happens
    under `cond`; cross-request operations never share locks."""

    def __init__(self, exec_id: str, request: BatchRequest, owners: list[str], node_id: str):
        self.exec_id = exec_id
        self.request = request
        self.owners = owners
        self.created_at = time.monotonic()
        self.cond = threading.Condition()
        self.results: dict[int, BatchItemResult] = {}
        self.recorded: set[int] = set()
        self.next_emit = 0
        self.soft_errors = 0
        self.recovery_attempts = 0
        self.local_indices = {i for i, o in enumerate(owners) if o == node_id}
        self.deadlines: dict[int, float] = {}
        self.pulls_inflight: set[int] = set()
        self.status = STATE_LIVE
        self.abort_reason: str | None = None
        self.emitting = False

    @property
    def size(self) -> int:
        return len(self.request.entries)

    def all_recorded(self) -> bool:
        return len(self.recorded) == self.size


class DtEngine:
    def __init__(
        self,
        node_id: str,
        map_provider,
        store: ObjectStore,
        metrics: MetricsRegistry,
        tuning: TuningConfig,
        pressure: PressureSource,
        readahead=None,
        pull_fn=None,
    ):
        self.node_id = node_id
        self._map_provider = map_provider
        self._store = store
        self._metrics = metrics
        self._tuning = tuning
        self._pressure = pressure
        self._readahead = readahead
        self._pull_fn = pull_fn
        self._registry: dict[str, ExecutionState] = {}
        self._registry_lock = threading.Lock()
        self._local_queue: queue.SimpleQueue = queue.SimpleQueue()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._recovery_pool = ThreadPoolExecutor(
            max_workers=4, thread_name_prefix="dt-recover"
        )

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        workers = max(1, self._tuning.readahead_workers)
        for i in range(workers):
            t = threading.Thread(target=self._local_worker, name=f"dt-local-{i}", daemon=True)
            t.start()
            self._threads.append(t)
        mon = threading.Thread(target=self._monitor, name="dt-monitor", daemon=True)
        mon.start()
        self._threads.append(mon)

    def stop(self) -> None:
        self._stop.set()
        self._recovery_pool.shutdown(wait=False, cancel_futures=True)
        for t in self._threads:
            t.join(timeout=2.0)
        with self._registry_lock:
            states = list(self._registry.values())
        for state in states:
            with state.cond:
                self._abort_locked(state, "engine_shutdown")
            self._release(state.exec_id)

    def registry_size(self) -> int:
        with self._registry_lock:
            return len(self._registry)

    # -- registration ------------------------------------------------------

    def register(self, request: BatchRequest, exec_id: str | None = None) -> str:
        decision = admit(
            self._pressure.current(),
            request_size_hint=len(request.entries),
            mem_critical=self._tuning.mem_critical,
            busy_threshold=self._tuning.busy_threshold,
            throttle_step_ms=self._tuning.throttle_step_ms,
        )
        if decision.kind == DECISION_REJECT:
            self._metrics.inc("admission_rejects_total")
            raise AdmissionRejected("memory pressure critical")

        exec_id = exec_id or new_exec_id()
        owners = owners_of(self._map_provider(), request.entries)
        state = ExecutionState(exec_id, request, owners, self.node_id)

        deadline = state.created_at + self._tuning.rxwait_timeout_ms / 1000.0
        for idx in range(state.size):
            if idx not in state.local_indices:
                state.deadlines[idx] = deadline

        with self._registry_lock:
            if exec_id in self._registry:
                raise RuntimeError(f"execution {exec_id} already registered")
            self._registry[exec_id] = state
            self._metrics.set_gauge("live_executions", len(self._registry))

        local_refs = [request.entries[i] for i in sorted(state.local_indices)]
        if self._readahead is not None and len(local_refs) > READAHEAD_MIN_SLICE:
            # cache warming pays off only for a long backlog; short slices
            # are read immediately and warming would double the IO
            self._readahead.enqueue(local_refs[2 * self._tuning.readahead_workers :])
        for idx in sorted(state.local_indices):
            self._local_queue.put((exec_id, idx, request.entries[idx]))

        log.info("EVT register exec=%s entries=%d t=%.6f", exec_id, state.size, time.time())
        return exec_id

    def _get(self, exec_id: str) -> ExecutionState | None:
        with self._registry_lock:
            return self._registry.get(exec_id)

    def _release(self, exec_id: str) -> None:
        with self._registry_lock:
            self._registry.pop(exec_id, None)
            self._metrics.set_gauge("live_executions", len(self._registry))
        log.info("EVT release exec=%s t=%.6f", exec_id, time.time())

    # -- result recording ----------------------------------------------------

    def accept_delivery(self, frame: DeliveryFrame) -> None:
        state = self._get(frame.exec_id)
        if state is None:
            self._metrics.inc("dropped_frames_total")
            return
        with state.cond:
            self._record_locked(state, frame.index, frame.status, frame.reason, frame.payload)

    def _record_locked(
        self, state: ExecutionState, index: int, status: str, reason: str | None, payload: bytes
    ) -> None:
        if state.status != STATE_LIVE:
            return
        if index < 0 or index >= state.size:
            self._abort_locked(state, f"entry index {index} out of range")
            return
        if index in state.recorded:
            self._metrics.inc("duplicate_frames_total")
            return

        state.recorded.add(index)
        state.deadlines.pop(index, None)
        state.pulls_inflight.discard(index)
        if index not in state.local_indices:
            self._metrics.inc("rxwait_seconds_total", time.monotonic() - state.created_at)

        name = canonical_entry_name(state.request.entries[index])
        if status == STATUS_OK:
            state.results[index] = BatchItemResult(index, name, STATUS_OK, payload=payload)
        else:
            if not state.request.coer:
                self._abort_locked(state, f"soft error at index {index}: {reason}")
                return
            if state.soft_errors + 1 > self._tuning.max_soft_errors:
                self._abort_locked(state, "soft error budget exceeded")
                return
            state.soft_errors += 1
            state.results[index] = BatchItemResult(
                index, name, STATUS_SOFT_ERROR, error_reason=reason or "unknown"
            )
        state.cond.notify_all()

    def _abort_locked(self, state: ExecutionState, reason: str) -> None:
        if state.status != STATE_LIVE:
            return
        state.status = STATE_ABORTED
        state.abort_reason = reason
        state.results.clear()
        self._metrics.inc("hard_errors_total")
        state.cond.notify_all()
        log.info("EVT abort exec=%s reason=%r t=%.6f", state.exec_id, reason, time.time())
        # an unclaimed abort stays as a tombstone so the redirected client
        # still learns the reason; the monitor reaps it if nobody comes

    # -- local reads ---------------------------------------------------------

    def _throttle_work_item(self) -> None:
        decision = admit(
            self._pressure.current(),
            mem_critical=self._tuning.mem_critical,
            busy_threshold=self._tuning.busy_threshold,
            throttle_step_ms=self._tuning.throttle_step_ms,
        )
        if decision.kind == DECISION_THROTTLE:
            time.sleep(decision.sleep_s)
            self._metrics.inc("throttle_seconds_total", decision.sleep_s)

    def _local_worker(self) -> None:
        while not self._stop.is_set():
            try:
                exec_id, index, ref = self._local_queue.get(timeout=0.2)
            except queue.Empty:
                continue
            state = self._get(exec_id)
            if state is None or state.status != STATE_LIVE:
                continue
            self._throttle_work_item()
            try:
                payload = self._store.read(ref)
                status, reason = STATUS_OK, None
            except SoftReadError as exc:
                payload, status, reason = b"", STATUS_SOFT_ERROR, exc.reason
            except StoreError as exc:
                with state.cond:
                    self._abort_locked(state, f"local read failed: {exc}")
                continue
            with state.cond:
                self._record_locked(state, index, status, reason, payload)

    # -- timeouts and recovery -------------------------------------------------

    def handle_timeout(self, exec_id: str, index: int) -> None:
        """Recovery step for one pending index past its deadline."""
        state = self._get(exec_id)
        if state is None:
            return
        with state.cond:
            if state.status != STATE_LIVE or index in state.recorded:
                return
            if state.recovery_attempts < self._tuning.gfn_attempts:
                state.recovery_attempts += 1
                attempt = state.recovery_attempts
                state.pulls_inflight.add(index)
                state.deadlines[index] = (
                    time.monotonic() + self._tuning.rxwait_timeout_ms / 1000.0
                )
                self._metrics.inc("recovery_attempts_total")
                broadcast = attempt >= self._tuning.gfn_attempts
                self._recovery_pool.submit(self._recover, exec_id, index, broadcast)
            else:
                self._record_locked(state, index, STATUS_SOFT_ERROR, SOFT_TIMEOUT, b"")

    def _recover(self, exec_id: str, index: int, broadcast: bool) -> None:
        """Pull the entry directly: from its owner, or from every target on
        the final attempt. A failed attempt re-enters the timeout cycle."""
        state = self._get(exec_id)
        if state is None:
            return
        try:
            if self._pull_fn is None:
                return
            ref = state.request.entries[index]
            owner = state.owners[index]
            cmap = self._map_provider()
            candidates = [t for t in cmap.targets if t.id == owner]
            if broadcast:
                candidates += [
                    t for t in cmap.targets if t.id not in (owner, self.node_id)
                ]
            for node in candidates:
                try:
                    frame = self._pull_fn(node.endpoint, exec_id, index, ref)
                except Exception:
                    continue
                if frame is None:
                    continue
                if frame.status == STATUS_OK:
                    with state.cond:
                        self._record_locked(state, index, STATUS_OK, None, frame.payload)
                    return
                if node.id == owner:
                    # the owner is authoritative about a miss
                    with state.cond:
                        self._record_locked(state, index, STATUS_SOFT_ERROR, frame.reason, b"")
                    return
        finally:
            with state.cond:
                if index not in state.recorded:
                    state.pulls_inflight.discard(index)
                    self._metrics.inc("recovery_failures_total")

    def _monitor(self) -> None:
        while not self._stop.wait(0.05):
            now = time.monotonic()
            with self._registry_lock:
                states = list(self._registry.values())
            for state in states:
                with state.cond:
                    unclaimed_expired = (
                        not state.emitting
                        and now - state.created_at > self._tuning.exec_ttl_s
                    )
                    live = state.status == STATE_LIVE
                    if unclaimed_expired and live:
                        self._abort_locked(state, "execution expired unclaimed")
                    expired = [
                        i
                        for i, dl in state.deadlines.items()
                        if dl <= now and i not in state.pulls_inflight and i not in state.recorded
                    ] if live and not unclaimed_expired else []
                if unclaimed_expired:
                    self._release(state.exec_id)
                    continue
                for index in expired:
                    self.handle_timeout(state.exec_id, index)

    # -- emission ---------------------------------------------------------------

    def emit(self, exec_id: str, sink, flush=None) -> int:
        """Stream the ordered archive for `exec_id` into `sink`.

        strm=true overlaps retrieval and consumption: each entry is written
        as soon as the cursor reaches it. strm=false resolves the whole
        batch before the first byte. Returns total bytes written; on abort
        raises ExecutionAborted (before any byte in buffered mode). The
        execution state is always released on return.
        """
        state = self._get(exec_id)
        if state is None:
            raise UnknownExecution(exec_id)
        with state.cond:
            if state.emitting:
                raise AlreadyConsumed(f"execution {exec_id} already being consumed")
            state.emitting = True
        try:
            if state.request.strm:
                total = self._emit_streaming(state, sink, flush)
            else:
                total = self._emit_buffered(state, sink)
            log.info("EVT complete exec=%s bytes=%d t=%.6f", exec_id, total, time.time())
            return total
        except BaseException:
            with state.cond:
                if state.status == STATE_LIVE:
                    self._abort_locked(state, "client disconnected")
            raise
        finally:
            self._release(exec_id)

    def _wait_for_index(self, state: ExecutionState, index: int) -> BatchItemResult:
        with state.cond:
            while True:
                if state.status != STATE_LIVE:
                    raise ExecutionAborted(state.abort_reason or "aborted")
                if index in state.results:
                    return state.results.pop(index)
                state.cond.wait(timeout=0.1)

    def _emit_streaming(self, state: ExecutionState, sink, flush) -> int:
        writer = TarWriter(sink)
        for index in range(state.size):
            result = self._wait_for_index(state, index)
            self._write_result(state, writer, result)
            state.next_emit = index + 1
            if flush is not None:
                # flush whenever the stream would otherwise go idle; while
                # results are already queued, let the sink coalesce writes
                with state.cond:
                    next_ready = index + 1 in state.results
                if not next_ready:
                    flush()
        return writer.finalize()

    def _emit_buffered(self, state: ExecutionState, sink) -> int:
        with state.cond:
            while not state.all_recorded():
                if state.status != STATE_LIVE:
                    raise ExecutionAborted(state.abort_reason or "aborted")
                state.cond.wait(timeout=0.1)
        buf = io.BytesIO()
        writer = TarWriter(buf)
        for index in range(state.size):
            result = self._wait_for_index(state, index)
            self._write_result(state, writer, result)
            state.next_emit = index + 1
        writer.finalize()
        sink.write(buf.getvalue())
        return writer.bytes_written

    def _write_result(self, state: ExecutionState, writer: TarWriter, result) -> None:
        self._metrics.inc("work_items_total")
        if result.status != STATUS_OK:
            writer.emit_placeholder(result.name, result.error_reason or "unknown")
            self._metrics.inc("soft_errors_total")
            return
        writer.emit_entry(result.name, result.payload)
        if state.request.entries[result.index].archpath is not None:
            self._metrics.inc("delivered_shard_members_count")
            self._metrics.inc("delivered_shard_members_bytes", len(result.payload))
        else:
            self._metrics.inc("delivered_objects_count")
            self._metrics.inc("delivered_objects_bytes", len(result.payload))

    def buffered_body(self, exec_id: str) -> bytes:
        """Convenience wrapper for handlers that need Content-Length first."""
        buf = io.BytesIO()
        self.emit(exec_id, buf)
        return buf.getvalue()
