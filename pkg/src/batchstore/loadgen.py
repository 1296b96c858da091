"""Load generator: dataset preparation plus GET-vs-batch benchmarking with
nearest-rank latency percentiles.

Latency is the full client-side request time: from issuing the request
(including the redirect hop) until every requested byte has been received.
In batch mode the per-object latency of a request is its batch latency
divided by the batch size. Throughput counts payload bytes only; TAR
framing is reported separately as overhead so both modes compare fairly.
"""

from __future__ import annotations

import argparse
import json
import math
import random
import subprocess
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import requests

GIB = 1024**3

_SIZE_SUFFIXES = {
    "gib": 1024**3,
    "mib": 1024**2,
    "kib": 1024,
    "gb": 10**9,
    "mb": 10**6,
    "kb": 10**3,
    "b": 1,
}


def parse_size(text: str) -> int:
    """'10KiB' / '1MiB' / '4096' -> bytes."""
    t = text.strip().lower()
    for suffix, mult in _SIZE_SUFFIXES.items():
        if t.endswith(suffix):
            return int(float(t[: -len(suffix)].strip()) * mult)
    return int(t)


def percentile(samples, q: float):
    """Nearest-rank percentile: sort ascending, index ceil(q*n) - 1."""
    if not samples:
        raise ValueError("percentile of empty sample set")
    if not 0 < q <= 1:
        raise ValueError(f"q must be in (0, 1], got {q}")
    ordered = sorted(samples)
    return ordered[max(0, math.ceil(q * len(ordered)) - 1)]


@dataclass(frozen=True)
class LatencyBlock:
    p50: float
    p95: float
    p99: float
    avg: float

    @classmethod
    def from_seconds(cls, samples) -> "LatencyBlock":
        ms = [s * 1000.0 for s in samples]
        return cls(
            p50=percentile(ms, 0.50),
            p95=percentile(ms, 0.95),
            p99=percentile(ms, 0.99),
            avg=sum(ms) / len(ms),
        )

    def to_dict(self) -> dict:
        return {"p50": self.p50, "p95": self.p95, "p99": self.p99, "avg": self.avg}


@dataclass
class BenchConfig:
    mode: str  # "get" | "getbatch"
    gateway: str
    object_size: int
    object_count: int
    bucket: str = "bench"
    batch_size: int = 32
    workers: int = 8
    duration_s: float = 60.0
    seed: int = 1
    coloc: bool = False
    strm: bool = True

    def __post_init__(self):
        if self.mode not in ("get", "getbatch"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.duration_s < 1:
            raise ValueError("duration must be >= 1s")
        if self.object_size <= 0:
            raise ValueError("object size must be positive")
        if self.object_count < 1:
            raise ValueError("empty dataset")
        if self.mode == "getbatch" and self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class BenchReport:
    mode: str
    object_size: int
    batch_size: int
    workers: int
    duration_s: float
    request_count: int
    error_count: int
    total_payload_bytes: int
    framing_overhead_bytes: int
    throughput_gib_s: float
    batch_latency: LatencyBlock
    per_object_latency: LatencyBlock

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "mode", "object_size", "batch_size", "workers", "duration_s",
            "request_count", "error_count", "total_payload_bytes",
            "framing_overhead_bytes", "throughput_gib_s",
        )}
        d["batch_latency_ms"] = self.batch_latency.to_dict()
        d["per_object_latency_ms"] = self.per_object_latency.to_dict()
        return d

    def table(self) -> str:
        head = f"{self.mode}" + (f" batch={self.batch_size}" if self.mode == "getbatch" else "")
        lines = [
            f"--- {head}  size={self.object_size}B  workers={self.workers}  "
            f"duration={self.duration_s:.0f}s",
            f"requests {self.request_count}  errors {self.error_count}  "
            f"payload {self.total_payload_bytes / GIB:.3f} GiB  "
            f"framing {self.framing_overhead_bytes / GIB:.3f} GiB",
            f"throughput {self.throughput_gib_s:.4f} GiB/s",
            "             P50       P95       P99       Avg   (ms)",
        ]
        for label, block in (("batch", self.batch_latency), ("object", self.per_object_latency)):
            lines.append(
                f"  {label:7s}{block.p50:9.2f} {block.p95:9.2f} "
                f"{block.p99:9.2f} {block.avg:9.2f}"
            )
        return "\n".join(lines)


def object_name(i: int) -> str:
    return f"obj-{i:08d}"


def object_payload(seed: int, i: int, size: int) -> bytes:
    return random.Random(seed * 1_000_003 + i).randbytes(size)


def prepare_dataset(cfg: BenchConfig, cachedrop: str | None = None) -> int:
    """Write object_count seeded objects through the gateway; idempotent for
    a fixed seed. Any PUT failure aborts."""
    errors: list[str] = []

    def put_range(worker_id: int, indices):
        with requests.Session() as session:
            for i in indices:
                if errors:
                    return
                url = f"{cfg.gateway}/v1/objects/{cfg.bucket}/{object_name(i)}"
                try:
                    r = session.put(url, data=object_payload(cfg.seed, i, cfg.object_size),
                                    timeout=60)
                    if r.status_code != 200:
                        errors.append(f"PUT {url}: {r.status_code} {r.text[:100]}")
                except requests.RequestException as exc:
                    errors.append(f"PUT {url}: {exc}")

    workers = min(cfg.workers, cfg.object_count)
    chunks = [range(w, cfg.object_count, workers) for w in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        list(ex.map(put_range, range(workers), chunks))
    if errors:
        raise RuntimeError(f"dataset preparation failed: {errors[0]}")
    if cachedrop:
        subprocess.run([cachedrop], check=True)
    return cfg.object_count


BLOCK = 512


def drain_tar(stream, gulp: int = 1 << 18) -> tuple[int, int]:
    """Consume a TAR stream, returning (payload_bytes, total_bytes).

    Counts regular-entry payloads only, so TAR framing (headers, padding,
    PAX blocks, terminator) lands in the overhead tally. Reads the response
    in large gulps; per-block reads through the HTTP stack dominate client
    cost otherwise. Raises ValueError on a truncated archive.
    """
    buf = bytearray()
    pos = 0

    def read_exact(n):
        nonlocal buf, pos
        while len(buf) - pos < n:
            chunk = stream.read(max(gulp, n - (len(buf) - pos)))
            if not chunk:
                raise ValueError("truncated archive")
            if pos:
                del buf[:pos]
                pos = 0
            buf += chunk
        out = bytes(buf[pos : pos + n])
        pos += n
        return out

    payload = 0
    total = 0
    while True:
        header = read_exact(BLOCK)
        total += BLOCK
        if header == b"\0" * BLOCK:
            total += len(read_exact(BLOCK))
            stream.read()  # drain any trailing bytes
            return payload, total
        size_field = header[124:136].split(b"\0", 1)[0].strip(b" ")
        size = int(size_field, 8) if size_field else 0
        stored = (size + BLOCK - 1) // BLOCK * BLOCK
        read_exact(stored)
        total += stored
        if header[156:157] == b"0":
            payload += size


@dataclass
class _WorkerStats:
    batch_samples: list = field(default_factory=list)
    payload_bytes: int = 0
    total_bytes: int = 0
    requests: int = 0
    errors: int = 0


def _run_get_worker(cfg: BenchConfig, worker_id: int, deadline: float, stats: _WorkerStats):
    rng = random.Random((cfg.seed << 16) ^ worker_id)
    with requests.Session() as session:
        while time.perf_counter() < deadline:
            name = object_name(rng.randrange(cfg.object_count))
            url = f"{cfg.gateway}/v1/objects/{cfg.bucket}/{name}"
            t0 = time.perf_counter()
            try:
                r = session.get(url, timeout=120)
                body = r.content
                elapsed = time.perf_counter() - t0
                stats.requests += 1
                if r.status_code != 200:
                    stats.errors += 1
                    continue
                stats.batch_samples.append(elapsed)
                stats.payload_bytes += len(body)
                stats.total_bytes += len(body)
            except requests.RequestException:
                stats.requests += 1
                stats.errors += 1


def _run_batch_worker(cfg: BenchConfig, worker_id: int, deadline: float, stats: _WorkerStats):
    rng = random.Random((cfg.seed << 16) ^ worker_id)
    params = {"coloc": "1"} if cfg.coloc else None
    with requests.Session() as session:
        while time.perf_counter() < deadline:
            names = [object_name(rng.randrange(cfg.object_count)) for _ in range(cfg.batch_size)]
            body = json.dumps(
                {
                    "mime": "tar",
                    "in": [{"bucket": cfg.bucket, "objname": n} for n in names],
                    "strm": cfg.strm,
                    "coer": False,
                }
            ).encode()
            t0 = time.perf_counter()
            try:
                r = session.request(
                    "GET", f"{cfg.gateway}/v1/batch", params=params, data=body,
                    stream=True, timeout=120,
                )
                stats.requests += 1
                if r.status_code != 200:
                    r.content
                    stats.errors += 1
                    continue
                payload, total = drain_tar(r.raw)
                elapsed = time.perf_counter() - t0
                stats.batch_samples.append(elapsed)
                stats.payload_bytes += payload
                stats.total_bytes += total
            except (requests.RequestException, ValueError):
                stats.requests += 1
                stats.errors += 1


def run(cfg: BenchConfig) -> BenchReport:
    """Drive the configured load for duration_s and report."""
    start = time.perf_counter()
    deadline = start + cfg.duration_s
    worker_fn = _run_get_worker if cfg.mode == "get" else _run_batch_worker
    all_stats = [_WorkerStats() for _ in range(cfg.workers)]
    threads = [
        threading.Thread(target=worker_fn, args=(cfg, i, deadline, all_stats[i]))
        for i in range(cfg.workers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - start

    batch_samples = [s for w in all_stats for s in w.batch_samples]
    if not batch_samples:
        raise RuntimeError("no successful requests; cannot report")
    payload = sum(w.payload_bytes for w in all_stats)
    total = sum(w.total_bytes for w in all_stats)
    divisor = cfg.batch_size if cfg.mode == "getbatch" else 1
    per_object = [s / divisor for s in batch_samples]

    return BenchReport(
        mode=cfg.mode,
        object_size=cfg.object_size,
        batch_size=divisor,
        workers=cfg.workers,
        duration_s=elapsed,
        request_count=sum(w.requests for w in all_stats),
        error_count=sum(w.errors for w in all_stats),
        total_payload_bytes=payload,
        framing_overhead_bytes=total - payload,
        throughput_gib_s=payload / elapsed / GIB,
        batch_latency=LatencyBlock.from_seconds(batch_samples),
        per_object_latency=LatencyBlock.from_seconds(per_object),
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="batchbench", description="object store load generator"
    )
    parser.add_argument("--mode", choices=["get", "getbatch"],
                        help="omit to only prepare the dataset")
    parser.add_argument("--size", default="10KiB", help="object size, e.g. 10KiB, 1MiB")
    parser.add_argument("--batch", type=int, default=32, help="entries per batch request")
    parser.add_argument("--workers", type=int, default=8)
    parser.add_argument("--duration", type=float, default=60.0, help="seconds")
    parser.add_argument("--bucket", default="bench")
    parser.add_argument("--gateway", default="http://127.0.0.1:8800")
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--coloc", action="store_true")
    parser.add_argument("--strm", action="store_true", default=True)
    parser.add_argument("--no-strm", dest="strm", action="store_false")
    parser.add_argument("--json", dest="json_path", help="write machine-readable report")
    parser.add_argument("--prepare", type=int, default=0, metavar="COUNT",
                        help="write COUNT objects before the run")
    parser.add_argument("--count", type=int, default=0,
                        help="dataset size when --prepare is skipped")
    parser.add_argument("--cachedrop", help="hook script run after preparation")
    args = parser.parse_args(argv)

    count = args.prepare or args.count
    if count < 1:
        parser.error("need --prepare COUNT or --count COUNT")

    cfg = BenchConfig(
        mode=args.mode or "get",
        gateway=args.gateway.rstrip("/"),
        object_size=parse_size(args.size),
        object_count=count,
        bucket=args.bucket,
        batch_size=args.batch,
        workers=args.workers,
        duration_s=args.duration,
        seed=args.seed,
        coloc=args.coloc,
        strm=args.strm,
    )

    if args.prepare:
        n = prepare_dataset(cfg, cachedrop=args.cachedrop)
        print(f"prepared {n} x {cfg.object_size}B objects in bucket {cfg.bucket!r}")
        if args.mode is None:
            return 0

    if args.mode is None:
        parser.error("--mode required to run a benchmark")

    report = run(cfg)
    print(report.table())
    if args.json_path:
        with open(args.json_path, "w") as f:
            json.dump(report.to_dict(), f, indent=2)
        print(f"report written to {args.json_path}")

    if report.request_count and report.error_count / report.request_count > 0.01:
        print(f"error rate {report.error_count}/{report.request_count} exceeds 1%",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
