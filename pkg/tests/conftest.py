"""Cluster fixtures shared by the integration and acceptance suites."""

import shutil
import tempfile
from pathlib import Path

import pytest
import requests

from batchstore.config import render_config
from batchstore.harness import launch
from tests.clientlib import free_port_pairs


def make_cluster(n_targets: int, tuning: dict | None = None, name: str = "testcluster"):
    """Launch a 1-proxy/N-target loopback cluster in a temp directory."""
    root = Path(tempfile.mkdtemp(prefix=f"bs-{name}-"))
    ports = free_port_pairs(n_targets + 1)
    text = render_config(
        name,
        proxies=[{"id": "p00", "listen": f"127.0.0.1:{ports[0]}"}],
        targets=[
            {
                "id": f"t{i:02d}",
                "listen": f"127.0.0.1:{ports[i + 1]}",
                "store_root": str(root / f"t{i:02d}"),
            }
            for i in range(n_targets)
        ],
        tuning=tuning,
    )
    config_path = root / "cluster.toml"
    config_path.write_text(text)
    handle = launch(config_path, log_dir=root / "logs")
    handle._tmp_root = root
    return handle


def teardown_cluster(handle):
    handle.down()
    shutil.rmtree(handle._tmp_root, ignore_errors=True)


@pytest.fixture(scope="session")
def cluster4():
    """1 proxy + 4 targets, short timeouts for fast fault tests."""
    handle = make_cluster(
        4,
        tuning={
            "rxwait_timeout_ms": 1200,
            "gfn_attempts": 2,
            "max_soft_errors": 8,
            "idle_timeout_s": 60.0,
        },
    )
    yield handle
    teardown_cluster(handle)


@pytest.fixture
def session():
    with requests.Session() as s:
        yield s


@pytest.fixture
def clean_injection(cluster4):
    """Ensure injected pressure/delay never leaks across tests."""
    yield cluster4
    for t in cluster4.config.targets:
        try:
            cluster4.clear_pressure(t.id)
            cluster4.clear_delay(t.id)
        except requests.RequestException:
            pass


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    outcomes: dict[str, str] = {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            nodeid = getattr(rep, "nodeid", "")
            when = getattr(rep, "when", None)
            if "test_acceptance.py" not in nodeid or when not in ("setup", "call"):
                continue
            if rep.failed:
                outcomes[nodeid] = "FAIL"
            elif rep.skipped:
                outcomes.setdefault(nodeid, "SKIP")
            elif rep.passed and when == "call":
                outcomes.setdefault(nodeid, "PASS")
    if outcomes:
        terminalreporter.write_sep("-", "acceptance criteria")
        for nodeid in sorted(outcomes):
            name = nodeid.split("::")[-1]
            terminalreporter.write_line(f"ACCEPTANCE {name}: {outcomes[nodeid]}")
