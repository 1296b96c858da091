"""Load generator: percentiles, size parsing, dataset prep, bench runs."""

import math
import random
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from batchstore.loadgen import (
    BenchConfig,
    LatencyBlock,
    main,
    object_payload,
    parse_size,
    percentile,
    prepare_dataset,
    run,
)


def test_parse_size():
    assert parse_size("10KiB") == 10240
    assert parse_size("1MiB") == 2**20
    assert parse_size("4096") == 4096
    assert parse_size("100kb") == 100_000
    assert parse_size(" 2 GiB ") == 2 * 2**30


def test_percentile_odd_median():
    assert percentile([5, 1, 4, 2, 3], 0.5) == 3


def test_percentile_singleton():
    for q in (0.1, 0.5, 0.95, 0.99, 1.0):
        assert percentile([7], q) == 7


def test_percentile_matches_sort_oracle():
    rng = random.Random(13)
    samples = [rng.uniform(0, 1000) for _ in range(10**4)]
    ordered = sorted(samples)
    for q in (0.5, 0.95, 0.99):
        want = ordered[math.ceil(q * len(ordered)) - 1]
        assert percentile(samples, q) == want


def test_percentile_errors():
    with pytest.raises(ValueError):
        percentile([], 0.5)
    with pytest.raises(ValueError):
        percentile([1], 1.5)


def test_latency_block_ordering():
    rng = random.Random(3)
    samples = [rng.uniform(0.001, 0.2) for _ in range(500)]
    block = LatencyBlock.from_seconds(samples)
    assert block.p50 <= block.p95 <= block.p99
    assert min(samples) * 1000 <= block.avg <= max(samples) * 1000


def test_config_validation():
    ok = dict(mode="get", gateway="http://x", object_size=10, object_count=5)
    BenchConfig(**ok)
    with pytest.raises(ValueError):
        BenchConfig(**{**ok, "mode": "putt"})
    with pytest.raises(ValueError):
        BenchConfig(**{**ok, "object_count": 0})
    with pytest.raises(ValueError):
        BenchConfig(**{**ok, "workers": 0})
    with pytest.raises(ValueError):
        BenchConfig(**{**ok, "duration_s": 0.1})
    with pytest.raises(ValueError):
        BenchConfig(**{**ok, "object_size": 0})


def test_seeded_payload_deterministic():
    a = object_payload(7, 3, 10240)
    b = object_payload(7, 3, 10240)
    assert a == b and len(a) == 10240
    assert object_payload(7, 4, 10240) != a
    assert object_payload(8, 3, 10240) != a


def test_cli_requires_count():
    assert_raises_systemexit(["--mode", "get"])


def test_cachedrop_hook_runs(tmp_path, fixed_latency_gateway):
    marker = tmp_path / "dropped"
    script = tmp_path / "drop.sh"
    script.write_text(f"#!/bin/sh\ntouch {marker}\n")
    script.chmod(0o755)
    cfg = BenchConfig(
        mode="get", gateway=fixed_latency_gateway, object_size=8,
        object_count=2, workers=1, duration_s=1.0,
    )
    prepare_dataset(cfg, cachedrop=str(script))
    assert marker.exists()


def assert_raises_systemexit(argv):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code != 0


class FixedLatencyHandler(BaseHTTPRequestHandler):
    """Synthetic gateway: every object GET takes a fixed 5 ms."""

    protocol_version = "HTTP/1.1"
    delay_s = 0.005
    body = b"y" * 64

    def do_GET(self):
        time.sleep(self.delay_s)
        self.send_response(200)
        self.send_header("Content-Length", str(len(self.body)))
        self.end_headers()
        self.wfile.write(self.body)

    def do_PUT(self):
        length = int(self.headers.get("Content-Length", 0) or 0)
        self.rfile.read(length)
        body = b'{"size": %d}' % length
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *a):
        pass


@pytest.fixture
def fixed_latency_gateway():
    server = ThreadingHTTPServer(("127.0.0.1", 0), FixedLatencyHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


def test_fixed_latency_oracle(fixed_latency_gateway):
    cfg = BenchConfig(
        mode="get",
        gateway=fixed_latency_gateway,
        object_size=64,
        object_count=100,
        workers=1,
        duration_s=2.0,
        seed=5,
    )
    report = run(cfg)
    assert report.error_count == 0
    slack = 25.0  # ms of scheduling noise
    for value in (report.batch_latency.p50, report.batch_latency.p95, report.batch_latency.p99):
        assert 5.0 <= value <= 5.0 + slack, report.batch_latency
    # get mode: batch block and per-object block are the same distribution
    assert report.batch_latency == report.per_object_latency
    # internal consistency: throughput x duration == payload
    assert report.throughput_gib_s * report.duration_s == pytest.approx(
        report.total_payload_bytes / 2**30, rel=0.01
    )


def test_prepare_and_bench_against_cluster(cluster4, session):
    gateway = cluster4.proxy_url
    cfg = BenchConfig(
        mode="getbatch",
        gateway=gateway,
        object_size=4096,
        object_count=60,
        bucket="lgbench",
        batch_size=8,
        workers=4,
        duration_s=2.0,
        seed=11,
    )
    assert prepare_dataset(cfg) == 60
    # re-preparing with the same seed is idempotent
    assert prepare_dataset(cfg) == 60

    report = run(cfg)
    assert report.error_count == 0
    assert report.request_count >= 4
    assert report.batch_size == 8
    assert report.total_payload_bytes % 4096 == 0
    # payload equivalence: every request fetched batch x size payload bytes
    assert report.total_payload_bytes == len(report_samples(report)) * 8 * 4096
    assert report.framing_overhead_bytes > 0
    blocks = report.batch_latency
    assert blocks.p50 <= blocks.p95 <= blocks.p99
    assert report.per_object_latency.p50 == pytest.approx(blocks.p50 / 8)

    get_report = run(
        BenchConfig(
            mode="get",
            gateway=gateway,
            object_size=4096,
            object_count=60,
            bucket="lgbench",
            workers=4,
            duration_s=2.0,
            seed=11,
        )
    )
    assert get_report.error_count == 0
    assert get_report.framing_overhead_bytes == 0
    assert get_report.batch_latency == get_report.per_object_latency


def report_samples(report):
    # request_count == successful + errored; with zero errors every request
    # contributed exactly one batch sample
    assert report.error_count == 0
    return range(report.request_count)
