"""Sender side of a batch execution: react to an activation broadcast by
reading locally owned entries and delivering them to the DT.

Senders are stateless: once every frame for an activation has been handed
to the transport, nothing about the request remains here. They never talk
to each other; the only peer destination used is the DT named in the
activation. An optional injected delay (admin endpoint) simulates slow
senders for fault and ordering tests.
"""

from __future__ import annotations

import logging
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor

from batchstore.admission import DECISION_THROTTLE, MetricsRegistry, PressureSource, admit
from batchstore.config import TuningConfig
from batchstore.model import (
    STATUS_OK,
    STATUS_SOFT_ERROR,
    ObjectRef,
    parse_batch_request,
)
from batchstore.placement import partition_entries
from batchstore.store import ObjectStore, SoftReadError, StoreError
from batchstore.transport import (
    ActivationMessage,
    DeliveryFrame,
    PeerConnectionPool,
    TransportError,
    encode_delivery,
)

log = logging.getLogger(__name__)

READ_CONCURRENCY_CAP = 8
READAHEAD_MIN_SLICE = 64


class DelayPolicy:
    """Injected per-frame delay, uniform in [min_ms, max_ms]."""

    def __init__(self):
        self._lock = threading.Lock()
        self._range: tuple[float, float] | None = None

    def set(self, min_ms: float, max_ms: float) -> None:
        with self._lock:
            self._range = (min_ms, max_ms)

    def clear(self) -> None:
        with self._lock:
            self._range = None

    def apply(self) -> None:
        with self._lock:
            rng = self._range
        if rng is not None:
            time.sleep(random.uniform(rng[0], rng[1]) / 1000.0)


class SenderEngine:
    def __init__(
        self,
        node_id: str,
        map_provider,
        store: ObjectStore,
        pool: PeerConnectionPool,
        metrics: MetricsRegistry,
        tuning: TuningConfig,
        pressure: PressureSource,
        readahead=None,
    ):
        self.node_id = node_id
        self._map_provider = map_provider
        self._store = store
        self._pool = pool
        self._metrics = metrics
        self._tuning = tuning
        self._pressure = pressure
        self._readahead = readahead
        self.delay = DelayPolicy()
        self._inflight = 0
        self._inflight_lock = threading.Lock()

    def inflight_activations(self) -> int:
        with self._inflight_lock:
            return self._inflight

    def on_activation(self, msg: ActivationMessage) -> None:
        """Handle one activation; runs on the peer server's reader thread,
        so the real work moves to a dedicated thread immediately."""
        if msg.dt_node == self.node_id:
            return  # the DT reads its own entries locally
        threading.Thread(
            target=self._run_activation,
            args=(msg,),
            name=f"sender-{msg.exec_id[:8]}",
            daemon=True,
        ).start()

    def _run_activation(self, msg: ActivationMessage) -> None:
        with self._inflight_lock:
            self._inflight += 1
        try:
            self._serve_activation(msg)
        except Exception:
            log.exception("activation %s failed", msg.exec_id)
        finally:
            with self._inflight_lock:
                self._inflight -= 1

    def _serve_activation(self, msg: ActivationMessage) -> None:
        log.info("EVT activation exec=%s dt=%s t=%.6f", msg.exec_id, msg.dt_node, time.time())
        request = parse_batch_request(msg.raw_request, max_bytes=self._tuning.max_body_bytes)
        cmap = self._map_provider()
        my_slice = partition_entries(cmap, request.entries).get(self.node_id, [])
        if not my_slice:
            return
        try:
            dt_endpoint = cmap.target_by_id(msg.dt_node).endpoint
        except KeyError:
            log.warning("activation for unknown DT %s dropped", msg.dt_node)
            return
        dt_peer = self._peer_endpoint(dt_endpoint)

        if self._readahead is not None and len(my_slice) > READAHEAD_MIN_SLICE:
            # cache warming pays off only for a long backlog; short slices
            # are read immediately and warming would double the IO
            self._readahead.enqueue([ref for _, ref in my_slice[2 * READ_CONCURRENCY_CAP :]])

        # a bounded worker set per activation keeps concurrent requests
        # independent of each other
        workers = min(READ_CONCURRENCY_CAP, len(my_slice))
        if workers <= 1:
            for index, ref in my_slice:
                self._read_and_send(msg.exec_id, index, ref, dt_peer)
        else:
            with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="sender-read") as ex:
                for index, ref in my_slice:
                    ex.submit(self._read_and_send, msg.exec_id, index, ref, dt_peer)

    @staticmethod
    def _peer_endpoint(http_endpoint: str) -> str:
        host, _, port = http_endpoint.rpartition(":")
        return f"{host}:{int(port) + 1}"

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

    def read_entry(self, exec_id: str, index: int, ref: ObjectRef) -> DeliveryFrame:
        """Local read as a delivery frame; misses become soft-error frames."""
        try:
            payload = self._store.read(ref)
            return DeliveryFrame(exec_id, index, STATUS_OK, None, payload)
        except SoftReadError as exc:
            return DeliveryFrame(exec_id, index, STATUS_SOFT_ERROR, exc.reason, b"")
        except StoreError as exc:
            # local hard failure crossing a node boundary degrades to soft
            return DeliveryFrame(exec_id, index, STATUS_SOFT_ERROR, f"io_error: {exc}", b"")

    def _read_and_send(self, exec_id: str, index: int, ref: ObjectRef, dt_peer: str) -> None:
        self._throttle_work_item()
        frame = self.read_entry(exec_id, index, ref)
        self.delay.apply()
        data = encode_delivery(frame)
        try:
            self._pool.send(dt_peer, data)
        except TransportError:
            # one retry on a fresh connection; past that the DT's timeout
            # and recovery path takes over
            try:
                self._pool.send(dt_peer, data)
            except TransportError:
                log.warning("delivery %s[%d] to %s failed twice", exec_id, index, dt_peer)

    def serve_pull(self, exec_id: str, index: int, ref: ObjectRef) -> DeliveryFrame:
        """Synchronous recovery read, ownership not checked: recovery may
        probe non-owners and a miss is an ordinary soft frame."""
        return self.read_entry(exec_id, index, ref)
