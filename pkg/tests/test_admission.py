"""Admission decisions and the metrics registry."""

import threading

import pytest

from batchstore.admission import (
    COUNTERS,
    DECISION_ADMIT,
    DECISION_REJECT,
    DECISION_THROTTLE,
    MetricsRegistry,
    PressureSource,
    PressureState,
    admit,
    parse_exposition,
)


def test_no_pressure_admits():
    assert admit(PressureState(0, 0, 0)).kind == DECISION_ADMIT


def test_memory_critical_rejects():
    assert admit(PressureState(0.95, 0, 0)).kind == DECISION_REJECT
    assert admit(PressureState(0.90, 0, 0)).kind == DECISION_REJECT
    assert admit(PressureState(0.89, 0, 0)).kind == DECISION_ADMIT


def test_cpu_pressure_throttles():
    d = admit(PressureState(0.5, 0.90, 0))
    assert d.kind == DECISION_THROTTLE
    assert d.sleep_s > 0


def test_disk_pressure_throttles():
    d = admit(PressureState(0.1, 0.1, 0.99))
    assert d.kind == DECISION_THROTTLE
    assert d.sleep_s > 0


def test_throttle_scales_with_overshoot():
    mild = admit(PressureState(0, 0.86, 0)).sleep_s
    severe = admit(PressureState(0, 0.99, 0)).sleep_s
    assert severe > mild > 0


def test_memory_beats_throttle():
    assert admit(PressureState(0.95, 0.99, 0.99)).kind == DECISION_REJECT


def test_pressure_clamped():
    p = PressureState(-1, 2, 0.5)
    assert (p.mem_used_fraction, p.cpu_busy_fraction, p.disk_busy_fraction) == (0, 1, 0.5)


def test_injected_source_overrides():
    src = PressureSource(mem_budget_bytes=1 << 40)
    measured = src.current()
    assert measured.source == "measured"
    assert measured.mem_used_fraction < 0.05  # huge budget
    src.set_injected(0.95, 0.1, 0.2)
    p = src.current()
    assert p.source == "injected"
    assert p.mem_used_fraction == 0.95
    src.clear_injected()
    assert src.current().source == "measured"


def test_registry_start_at_zero_and_expose():
    reg = MetricsRegistry()
    text = reg.expose()
    parsed = parse_exposition(text)
    for name in COUNTERS:
        assert f"# TYPE {name} counter" in text
        assert parsed[name] == 0
    assert parsed["live_executions"] == 0


def test_registry_increments_and_isolation():
    reg = MetricsRegistry()
    reg.inc("admission_rejects_total")
    snap = reg.snapshot()
    assert snap["admission_rejects_total"] == 1
    assert all(v == 0 for k, v in snap.items() if k != "admission_rejects_total")


def test_registry_never_decreases():
    reg = MetricsRegistry()
    with pytest.raises(ValueError):
        reg.inc("work_items_total", -1)


def test_float_counters():
    reg = MetricsRegistry()
    reg.inc("rxwait_seconds_total", 0.125)
    reg.inc("rxwait_seconds_total", 0.25)
    assert reg.get("rxwait_seconds_total") == pytest.approx(0.375)
    assert parse_exposition(reg.expose())["rxwait_seconds_total"] == pytest.approx(0.375)


def test_expose_deterministic_without_traffic():
    reg = MetricsRegistry()
    reg.inc("work_items_total", 5)
    assert reg.expose() == reg.expose()


def test_registry_thread_safety():
    reg = MetricsRegistry()

    def bump():
        for _ in range(10_000):
            reg.inc("work_items_total")

    threads = [threading.Thread(target=bump) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert reg.get("work_items_total") == 80_000


def test_unknown_counter_is_an_error():
    reg = MetricsRegistry()
    with pytest.raises(KeyError):
        reg.inc("typo_total")
