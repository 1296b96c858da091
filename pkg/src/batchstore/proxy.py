"""Stateless gateway node: DT selection, three-phase batch orchestration,
object-API routing, and cluster map service.

The default batch path never parses the request body: the DT is chosen by
hashing an opaque per-request id, and the raw bytes are forwarded verbatim.
Only a colocation hint (query parameter, or a `coloc` key detected in the
body by substring probe) triggers a parse. Phases: (1) register at the DT,
(2) broadcast activation to the remaining targets, (3) redirect the client.
No per-request state survives the response.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor, wait
from urllib.parse import urlencode

import requests

from batchstore.admission import MetricsRegistry
from batchstore.config import ClusterConfig, load_config
from batchstore.httpd import HttpError, NodeHTTPServer, make_handler
from batchstore.model import RequestError, new_exec_id, parse_batch_request
from batchstore.placement import owner_of, select_dt_colocated, select_dt_default
from batchstore.model import ObjectRef
from batchstore.transport import ActivationMessage, PeerConnectionPool, TransportError, encode_activation

log = logging.getLogger(__name__)

PROXY_COUNTERS = (
    "batch_requests_total",
    "body_parses_total",
    "redirects_total",
    "relayed_429_total",
    "activation_failures_total",
    "object_puts_total",
    "object_gets_total",
)


class ProxyNode:
    def __init__(self, config: ClusterConfig, node_id: str, config_path=None):
        self.config = config
        self.node_cfg = config.node_by_id(node_id)
        self.node_id = node_id
        self._config_path = config_path
        self._map_version = 1
        self._map = config.cluster_map(self._map_version)
        self._map_lock = threading.Lock()
        self.tuning = config.tuning
        self.metrics = MetricsRegistry(counters=PROXY_COUNTERS, gauges=())
        self.pool = PeerConnectionPool(
            idle_timeout=self.tuning.idle_timeout_s,
            max_conns_per_peer=self.tuning.max_conns_per_peer,
            connect_timeout=self.tuning.connect_timeout_s,
        )
        self.httpd = NodeHTTPServer(
            (self.node_cfg.host, self.node_cfg.port), make_handler(self)
        )
        self._http_thread: threading.Thread | None = None
        self._sessions = threading.local()
        self._activation_pool = ThreadPoolExecutor(
            max_workers=16, thread_name_prefix="activate"
        )

    def cluster_map(self):
        with self._map_lock:
            return self._map

    def _session(self) -> requests.Session:
        if not hasattr(self._sessions, "s"):
            self._sessions.s = requests.Session()
        return self._sessions.s

    def start(self) -> None:
        self._http_thread = threading.Thread(
            target=self.httpd.serve_forever, name="http", daemon=True
        )
        self._http_thread.start()
        log.info("proxy %s listening on %s", self.node_id, self.node_cfg.listen)

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        self._activation_pool.shutdown(wait=False, cancel_futures=True)
        self.pool.close()

    # -- http -------------------------------------------------------------------

    def handle_GET(self, req, path, query):
        if path == "/health":
            req.send_json(200, {"id": self.node_id, "role": "proxy"})
        elif path == "/metrics":
            req.send_bytes(200, self.metrics.expose().encode(), "text/plain; version=0.0.4")
        elif path == "/v1/cluster":
            req.send_json(200, self.cluster_map().to_wire())
        elif path == "/v1/batch":
            self._serve_batch(req, query)
        elif path.startswith("/v1/objects/"):
            self._serve_object_get(req, path, query)
        else:
            raise HttpError(404, f"no route {path}")

    def handle_POST(self, req, path, query):
        if path == "/v1/admin/reload":
            self._serve_admin_reload(req)
        else:
            raise HttpError(404, f"no route {path}")

    def handle_PUT(self, req, path, query):
        if path.startswith("/v1/objects/"):
            self._serve_object_put(req, path)
        else:
            raise HttpError(404, f"no route {path}")

    # -- batch orchestration ---------------------------------------------------

    def _serve_batch(self, req, query):
        self.metrics.inc("batch_requests_total")
        body = req.read_body(self.tuning.max_body_bytes)
        if not body:
            raise HttpError(400, "batch request needs a JSON body")
        cmap = self.cluster_map()

        dt_id = self._choose_dt(body, query, cmap)
        dt = cmap.target_by_id(dt_id)

        # phase 1: registration
        try:
            resp = self._session().post(
                f"http://{dt.endpoint}/v1/batch",
                data=body,
                timeout=(self.tuning.connect_timeout_s, 30),
            )
        except requests.RequestException as exc:
            raise HttpError(503, f"designated target unreachable: {exc}")
        if resp.status_code == 429:
            self.metrics.inc("relayed_429_total")
            raise HttpError(429, "designated target refused: memory pressure")
        if resp.status_code != 200:
            detail = resp.text[:200]
            raise HttpError(resp.status_code if resp.status_code >= 400 else 502, detail)
        exec_id = resp.json()["exec_id"]

        # phase 2: sender activation (parallel, best effort, bounded)
        self._broadcast_activation(cmap, dt_id, exec_id, body)

        # phase 3: client redirection
        self.metrics.inc("redirects_total")
        req.send_redirect(f"http://{dt.endpoint}/v1/batch/{exec_id}")

    def _choose_dt(self, body: bytes, query, cmap) -> str:
        coloc = None
        if "coloc" in query:
            try:
                coloc = int(query["coloc"])
            except ValueError:
                raise HttpError(400, f"bad coloc value {query['coloc']!r}")
        elif b'"coloc"' in body:
            # probe avoids unmarshaling bodies that cannot carry the hint
            coloc = self._parse(body).coloc

        if coloc is not None and coloc >= 1:
            request = self._parse(body)
            return select_dt_colocated(cmap, request.entries)
        return select_dt_default(cmap, new_exec_id())

    def _parse(self, body: bytes):
        self.metrics.inc("body_parses_total")
        try:
            return parse_batch_request(body, max_bytes=self.tuning.max_body_bytes)
        except RequestError as exc:
            raise HttpError(400, str(exc))

    def _broadcast_activation(self, cmap, dt_id: str, exec_id: str, body: bytes) -> None:
        data = encode_activation(ActivationMessage(exec_id, dt_id, body))
        senders = [t for t in cmap.targets if t.id != dt_id]
        if not senders:
            return

        def send_one(node):
            endpoint = f"{node.host}:{node.port + 1}"
            for attempt in (1, 2):
                try:
                    self.pool.send_with_ack(endpoint, data, self.tuning.activation_timeout_s)
                    return
                except TransportError:
                    # first failure is usually a stale pooled connection;
                    # the retry runs on a fresh one
                    if attempt == 2:
                        # a sender that misses activation is covered by the
                        # DT's timeout/recovery path
                        self.metrics.inc("activation_failures_total")

        futures = [self._activation_pool.submit(send_one, n) for n in senders]
        wait(futures, timeout=2 * self.tuning.activation_timeout_s + 1)

    # -- objects API --------------------------------------------------------------

    @staticmethod
    def _parse_object_path(path) -> tuple[str, str]:
        rest = path[len("/v1/objects/") :]
        bucket, _, objname = rest.partition("/")
        if not bucket or not objname:
            raise HttpError(400, "expected /v1/objects/{bucket}/{objname}")
        return bucket, objname

    def _serve_object_get(self, req, path, query):
        self.metrics.inc("object_gets_total")
        bucket, objname = self._parse_object_path(path)
        try:
            ref = ObjectRef(bucket, objname)
        except RequestError as exc:
            raise HttpError(400, str(exc))
        owner = self.cluster_map().target_by_id(owner_of(self.cluster_map(), ref))
        suffix = ""
        if "archpath" in query:
            suffix = "?" + urlencode({"archpath": query["archpath"]})
        req.send_redirect(f"http://{owner.endpoint}{path}{suffix}")

    def _serve_object_put(self, req, path):
        self.metrics.inc("object_puts_total")
        bucket, objname = self._parse_object_path(path)
        body = req.read_body(self.tuning.max_body_bytes)
        try:
            ref = ObjectRef(bucket, objname)
        except RequestError as exc:
            raise HttpError(400, str(exc))
        owner = self.cluster_map().target_by_id(owner_of(self.cluster_map(), ref))
        try:
            resp = self._session().put(
                f"http://{owner.endpoint}{path}",
                data=body,
                timeout=(self.tuning.connect_timeout_s, 60),
            )
        except requests.RequestException as exc:
            raise HttpError(503, f"owner target unreachable: {exc}")
        req.send_bytes(
            resp.status_code, resp.content, resp.headers.get("Content-Type", "application/json")
        )

    def _serve_admin_reload(self, req):
        if self._config_path is None:
            raise HttpError(400, "node started without a config path")
        new_config = load_config(self._config_path)
        with self._map_lock:
            self._map_version += 1
            self._map = new_config.cluster_map(self._map_version)
        req.send_json(200, {"version": self._map_version})
