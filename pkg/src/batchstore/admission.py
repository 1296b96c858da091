"""Admission control, throttling, and per-node observability counters.

Memory pressure is a hard constraint: past the critical threshold new
requests are rejected with HTTP 429 while in-flight work keeps running.
CPU/disk pressure instead inserts calibrated sleeps at work-item
granularity. Pressure comes from a measured sampler (process RSS against a
budget, smoothed cpu/disk busy fractions) or from an injected source that
tests set through the admin endpoint.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import psutil

SOURCE_MEASURED = "measured"
SOURCE_INJECTED = "injected"

DECISION_ADMIT = "admit"
DECISION_REJECT = "reject_429"
DECISION_THROTTLE = "admit_with_throttle"


def _clamp(x: float) -> float:
    return 0.0 if x < 0 else 1.0 if x > 1 else float(x)


@dataclass(frozen=True)
class PressureState:
    mem_used_fraction: float
    cpu_busy_fraction: float
    disk_busy_fraction: float
    source: str = SOURCE_MEASURED

    def __post_init__(self):
        object.__setattr__(self, "mem_used_fraction", _clamp(self.mem_used_fraction))
        object.__setattr__(self, "cpu_busy_fraction", _clamp(self.cpu_busy_fraction))
        object.__setattr__(self, "disk_busy_fraction", _clamp(self.disk_busy_fraction))


@dataclass(frozen=True)
class AdmissionDecision:
    kind: str
    sleep_s: float = 0.0


def admit(
    pressure: PressureState,
    request_size_hint: int = 0,
    *,
    mem_critical: float = 0.90,
    busy_threshold: float = 0.85,
    throttle_step_ms: float = 10.0,
) -> AdmissionDecision:
    """Decide what to do with new work under the given pressure.

    Throttle duration scales with overshoot: one `throttle_step_ms` per
    percentage point that cpu/disk busy exceeds the threshold.
    """
    if pressure.mem_used_fraction >= mem_critical:
        return AdmissionDecision(DECISION_REJECT)
    busy = max(pressure.cpu_busy_fraction, pressure.disk_busy_fraction)
    if busy >= busy_threshold:
        overshoot_points = (busy - busy_threshold) * 100.0
        sleep_s = max(throttle_step_ms * overshoot_points, throttle_step_ms) / 1000.0
        return AdmissionDecision(DECISION_THROTTLE, sleep_s=sleep_s)
    return AdmissionDecision(DECISION_ADMIT)


class PressureSource:
    """Current pressure provider with a test-injectable override.

    Measured mode samples process RSS against `mem_budget_bytes` and keeps
    exponentially smoothed cpu/disk busy fractions (tau ~ a few samples).
    """

    def __init__(self, mem_budget_bytes: int | None = None, sample_interval: float = 1.0):
        self._lock = threading.Lock()
        self._injected: PressureState | None = None
        self._mem_budget = mem_budget_bytes or psutil.virtual_memory().total
        self._interval = sample_interval
        self._proc = psutil.Process()
        self._cpu_ewma = 0.0
        self._disk_ewma = 0.0
        self._last_disk: tuple[float, float] | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._snapshot: PressureState | None = None  # maintained by the sampler

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="pressure", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def set_injected(self, mem: float, cpu: float, disk: float) -> None:
        with self._lock:
            self._injected = PressureState(mem, cpu, disk, SOURCE_INJECTED)

    def clear_injected(self) -> None:
        with self._lock:
            self._injected = None

    def current(self) -> PressureState:
        """Latest pressure; a cached snapshot on the hot path once the
        sampler runs, a fresh probe otherwise."""
        with self._lock:
            if self._injected is not None:
                return self._injected
            if self._snapshot is not None:
                return self._snapshot
            return PressureState(
                self._mem_fraction(), self._cpu_ewma, self._disk_ewma, SOURCE_MEASURED
            )

    def _mem_fraction(self) -> float:
        try:
            return self._proc.memory_info().rss / self._mem_budget
        except psutil.Error:
            return 0.0

    def _run(self) -> None:
        alpha = 0.3
        ncpu = psutil.cpu_count() or 1
        self._proc.cpu_percent(interval=None)  # prime the sampler
        while not self._stop.wait(self._interval):
            try:
                # this process's share of the whole machine
                cpu = self._proc.cpu_percent(interval=None) / 100.0 / ncpu
            except psutil.Error:
                cpu = 0.0
            disk = self._disk_busy_fraction()
            mem = self._mem_fraction()
            with self._lock:
                self._cpu_ewma += alpha * (cpu - self._cpu_ewma)
                self._disk_ewma += alpha * (disk - self._disk_ewma)
                self._snapshot = PressureState(
                    mem, self._cpu_ewma, self._disk_ewma, SOURCE_MEASURED
                )

    def _disk_busy_fraction(self) -> float:
        try:
            counters = psutil.disk_io_counters()
            busy_ms = getattr(counters, "busy_time", None)
        except Exception:
            return 0.0
        if busy_ms is None:
            return 0.0
        now = time.monotonic()
        prev = self._last_disk
        self._last_disk = (now, busy_ms)
        if prev is None or now <= prev[0]:
            return 0.0
        return _clamp((busy_ms - prev[1]) / 1000.0 / (now - prev[0]))


# Counter names, in exposition order. *_seconds_total counters are floats.
COUNTERS = (
    "work_items_total",
    "delivered_objects_count",
    "delivered_objects_bytes",
    "delivered_shard_members_count",
    "delivered_shard_members_bytes",
    "rxwait_seconds_total",
    "throttle_seconds_total",
    "hard_errors_total",
    "admission_rejects_total",
    "soft_errors_total",
    "recovery_attempts_total",
    "recovery_failures_total",
    "duplicate_frames_total",
    "dropped_frames_total",
)

GAUGES = ("live_executions",)


class MetricsRegistry:
    """Monotonic counters plus a few gauges, with text exposition."""

    def __init__(self, counters=COUNTERS, gauges=GAUGES):
        self._lock = threading.Lock()
        self._counters = {name: 0 for name in counters}
        self._gauges = {name: 0 for name in gauges}

    def inc(self, name: str, value: float = 1) -> None:
        if value < 0:
            raise ValueError("counters never decrease")
        with self._lock:
            self._counters[name] += value

    def set_gauge(self, name: str, value: float) -> None:
        with self._lock:
            self._gauges[name] = value

    def get(self, name: str) -> float:
        with self._lock:
            if name in self._counters:
                return self._counters[name]
            return self._gauges[name]

    def snapshot(self) -> dict:
        with self._lock:
            out = dict(self._counters)
            out.update(self._gauges)
            return out

    def expose(self) -> str:
        """Prometheus text exposition format, stable order."""
        with self._lock:
            counters = dict(self._counters)
            gauges = dict(self._gauges)
        lines = []
        for name, value in counters.items():
            lines.append(f"# TYPE {name} counter")
            lines.append(f"{name} {_fmt(value)}")
        for name, value in gauges.items():
            lines.append(f"# TYPE {name} gauge")
            lines.append(f"{name} {_fmt(value)}")
        return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_exposition(text: str) -> dict:
    """Inverse of expose(); used by tests and the harness."""
    out = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        name, _, raw = line.partition(" ")
        out[name] = float(raw) if ("." in raw or "e" in raw) else int(raw)
    return out
