"""Storage target node: object store + DT engine + sender engine + peer
transport, exposed over one HTTP listener (data plane on port + 1)."""

from __future__ import annotations

import json
import logging
import threading
import time

import requests

from batchstore.admission import MetricsRegistry, PressureSource
from batchstore.config import ClusterConfig, load_config
from batchstore.dt import (
    AdmissionRejected,
    AlreadyConsumed,
    DtEngine,
    ExecutionAborted,
    UnknownExecution,
)
from batchstore.httpd import HttpError, NodeHTTPServer, make_handler
from batchstore.model import ObjectRef, RequestError, parse_batch_request
from batchstore.store import ObjectStore, ReadaheadPool, SoftReadError, StoreError
from batchstore.sender import SenderEngine
from batchstore.transport import (
    ActivationMessage,
    DeliveryFrame,
    PeerConnectionPool,
    PeerServer,
    decode_message,
    encode_delivery,
)

log = logging.getLogger(__name__)


class _LazyChunkedSink:
    """Chunked response writer that sends headers on the first byte, so an
    execution aborted before any output still gets a clean error status."""

    def __init__(self, req):
        self._req = req
        self._writer = None
        self.started = False

    def write(self, data: bytes) -> None:
        if self._writer is None:
            self._writer = self._req.start_chunked("application/x-tar")
            self.started = True
        self._writer.write(data)

    def flush(self) -> None:
        if self._writer is not None:
            self._writer.flush()

    def close(self) -> None:
        if self._writer is None:
            self._writer = self._req.start_chunked("application/x-tar")
            self.started = True
        self._writer.close()


class TargetNode:
    def __init__(self, config: ClusterConfig, node_id: str, config_path=None):
        self.config = config
        self.node_cfg = config.node_by_id(node_id)
        self.node_id = node_id
        self._config_path = config_path
        self._map_version = 1
        self._map = config.cluster_map(self._map_version)
        self._map_lock = threading.Lock()

        tuning = config.tuning
        self.tuning = tuning
        self.metrics = MetricsRegistry()
        self.store = ObjectStore(self.node_cfg.store_root)
        self.pressure = PressureSource(
            mem_budget_bytes=tuning.mem_budget_mb * 1024 * 1024 or None
        )
        self.readahead = ReadaheadPool(self.store, workers=tuning.readahead_workers)
        self.pool = PeerConnectionPool(
            idle_timeout=tuning.idle_timeout_s,
            max_conns_per_peer=tuning.max_conns_per_peer,
            connect_timeout=tuning.connect_timeout_s,
        )
        self.dt = DtEngine(
            node_id=node_id,
            map_provider=self.cluster_map,
            store=self.store,
            metrics=self.metrics,
            tuning=tuning,
            pressure=self.pressure,
            readahead=self.readahead,
            pull_fn=self._pull_entry,
        )
        self.sender = SenderEngine(
            node_id=node_id,
            map_provider=self.cluster_map,
            store=self.store,
            pool=self.pool,
            metrics=self.metrics,
            tuning=tuning,
            pressure=self.pressure,
            readahead=self.readahead,
        )
        self.peer_server = PeerServer(
            self.node_cfg.host, self.node_cfg.peer_port, self._on_peer_message
        )
        self.httpd = NodeHTTPServer(
            (self.node_cfg.host, self.node_cfg.port), make_handler(self)
        )
        self._http_thread: threading.Thread | None = None
        self._reaper_thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._sessions = threading.local()

    # -- wiring ---------------------------------------------------------------

    def cluster_map(self):
        with self._map_lock:
            return self._map

    def _on_peer_message(self, msg):
        if isinstance(msg, DeliveryFrame):
            self.dt.accept_delivery(msg)
        elif isinstance(msg, ActivationMessage):
            self.sender.on_activation(msg)

    def _session(self) -> requests.Session:
        if not hasattr(self._sessions, "s"):
            self._sessions.s = requests.Session()
        return self._sessions.s

    def _pull_entry(self, endpoint: str, exec_id: str, index: int, ref: ObjectRef):
        params = {
            "exec": exec_id,
            "idx": str(index),
            "bucket": ref.bucket,
            "objname": ref.objname,
        }
        if ref.archpath is not None:
            params["archpath"] = ref.archpath
        resp = self._session().get(
            f"http://{endpoint}/v1/pull",
            params=params,
            timeout=(self.tuning.connect_timeout_s, 30),
        )
        resp.raise_for_status()
        return decode_message(resp.content)

    def _reaper(self):
        while not self._stop.wait(5.0):
            self.pool.reclaim_idle()

    def start(self) -> None:
        self.pressure.start()
        self.dt.start()
        self.peer_server.start()
        self._http_thread = threading.Thread(
            target=self.httpd.serve_forever, name="http", daemon=True
        )
        self._http_thread.start()
        self._reaper_thread = threading.Thread(target=self._reaper, name="reaper", daemon=True)
        self._reaper_thread.start()
        log.info("target %s listening on %s (peer %d)",
                 self.node_id, self.node_cfg.listen, self.node_cfg.peer_port)

    def stop(self) -> None:
        self._stop.set()
        self.httpd.shutdown()
        self.httpd.server_close()
        self.peer_server.stop()
        self.dt.stop()
        self.readahead.close()
        self.pool.close()
        self.pressure.stop()

    # -- http handlers ----------------------------------------------------------

    def handle_GET(self, req, path, query):
        if path == "/health":
            req.send_json(200, {"id": self.node_id, "role": "target"})
        elif path == "/metrics":
            req.send_bytes(200, self.metrics.expose().encode(), "text/plain; version=0.0.4")
        elif path == "/v1/cluster":
            req.send_json(200, self.cluster_map().to_wire())
        elif path.startswith("/v1/batch/"):
            self._serve_batch_stream(req, path.rsplit("/", 1)[1])
        elif path == "/v1/pull":
            self._serve_pull(req, query)
        elif path.startswith("/v1/objects/"):
            self._serve_object_get(req, path, query)
        else:
            raise HttpError(404, f"no route {path}")

    def handle_POST(self, req, path, query):
        if path == "/v1/batch":
            self._serve_register(req)
        elif path == "/v1/admin/pressure":
            self._serve_admin_pressure(req)
        elif path == "/v1/admin/delay":
            self._serve_admin_delay(req)
        elif path == "/v1/admin/reload":
            self._serve_admin_reload(req)
        else:
            raise HttpError(404, f"no route {path}")

    def handle_PUT(self, req, path, query):
        if path.startswith("/v1/objects/"):
            self._serve_object_put(req, path)
        else:
            raise HttpError(404, f"no route {path}")

    # -- batch execution ----------------------------------------------------------

    def _serve_register(self, req):
        body = req.read_body(self.tuning.max_body_bytes)
        try:
            request = parse_batch_request(body, max_bytes=self.tuning.max_body_bytes)
        except RequestError as exc:
            raise HttpError(400, str(exc))
        try:
            exec_id = self.dt.register(request)
        except AdmissionRejected as exc:
            raise HttpError(429, str(exc))
        req.send_json(200, {"exec_id": exec_id})

    def _serve_batch_stream(self, req, exec_id):
        state = self.dt._get(exec_id)
        if state is None:
            raise HttpError(404, f"unknown execution {exec_id}")
        if state.request.strm:
            sink = _LazyChunkedSink(req)
            try:
                self.dt.emit(exec_id, sink, flush=sink.flush)
                sink.close()
            except AlreadyConsumed as exc:
                raise HttpError(409, str(exc))
            except ExecutionAborted as exc:
                if not sink.started:
                    raise HttpError(500, f"execution aborted: {exc.reason}")
                # mid-stream failure: terminate without the TAR trailer so
                # the client sees a truncated archive
                log.warning("stream %s aborted: %s", exec_id, exc.reason)
                req.close_connection = True
        else:
            try:
                body = self.dt.buffered_body(exec_id)
            except AlreadyConsumed as exc:
                raise HttpError(409, str(exc))
            except ExecutionAborted as exc:
                raise HttpError(500, f"execution aborted: {exc.reason}")
            except UnknownExecution:
                raise HttpError(404, f"unknown execution {exec_id}")
            req.send_bytes(200, body, "application/x-tar")

    def _serve_pull(self, req, query):
        try:
            exec_id = query.get("exec", "")
            index = int(query.get("idx", "0"))
            ref = ObjectRef(
                bucket=query["bucket"],
                objname=query["objname"],
                archpath=query.get("archpath"),
            )
        except (KeyError, ValueError, RequestError) as exc:
            raise HttpError(400, f"bad pull request: {exc}")
        frame = self.sender.serve_pull(exec_id, index, ref)
        req.send_bytes(200, encode_delivery(frame))

    # -- objects API ------------------------------------------------------------

    @staticmethod
    def _parse_object_path(path) -> tuple[str, str]:
        rest = path[len("/v1/objects/") :]
        bucket, _, objname = rest.partition("/")
        if not bucket or not objname:
            raise HttpError(400, "expected /v1/objects/{bucket}/{objname}")
        return bucket, objname

    def _serve_object_get(self, req, path, query):
        bucket, objname = self._parse_object_path(path)
        try:
            ref = ObjectRef(bucket, objname, query.get("archpath"))
            payload = self.store.read(ref)
        except SoftReadError as exc:
            raise HttpError(404, str(exc))
        except (StoreError, RequestError) as exc:
            raise HttpError(400, str(exc))
        req.send_bytes(200, payload)

    def _serve_object_put(self, req, path):
        bucket, objname = self._parse_object_path(path)
        body = req.read_body(self.tuning.max_body_bytes)
        try:
            size = self.store.put(ObjectRef(bucket, objname), body)
        except (StoreError, RequestError) as exc:
            raise HttpError(400, str(exc))
        req.send_json(200, {"size": size})

    # -- admin ---------------------------------------------------------------------

    def _serve_admin_pressure(self, req):
        body = json.loads(req.read_body(1 << 20) or b"{}")
        if body.get("clear"):
            self.pressure.clear_injected()
        else:
            self.pressure.set_injected(
                float(body.get("mem", 0)), float(body.get("cpu", 0)), float(body.get("disk", 0))
            )
        req.send_json(200, {"ok": True})

    def _serve_admin_delay(self, req):
        body = json.loads(req.read_body(1 << 20) or b"{}")
        if body.get("clear"):
            self.sender.delay.clear()
        else:
            self.sender.delay.set(float(body.get("min_ms", 0)), float(body.get("max_ms", 0)))
        req.send_json(200, {"ok": True})

    def _serve_admin_reload(self, req):
        if self._config_path is None:
            raise HttpError(400, "node started without a config path")
        new_config = load_config(self._config_path)
        with self._map_lock:
            self._map_version += 1
            self._map = new_config.cluster_map(self._map_version)
        req.send_json(200, {"version": self._map_version})
