"""Launch a real cluster through the server package's public CLI."""

import shutil
import socket
import subprocess
import tempfile
import time
from pathlib import Path

import pytest
import requests


def free_port_pairs(count):
    ports, held = [], []
    while len(ports) < count:
        s1 = socket.socket()
        s1.bind(("127.0.0.1", 0))
        port = s1.getsockname()[1]
        try:
            s2 = socket.socket()
            s2.bind(("127.0.0.1", port + 1))
        except OSError:
            s1.close()
            continue
        ports.append(port)
        held += [s1, s2]
    for s in held:
        s.close()
    return ports


CONFIG_TEMPLATE = """\
[cluster]
name = "sdk-test"

[[proxy]]
id = "p00"
listen = "127.0.0.1:{proxy_port}"

{targets}
[tuning]
rxwait_timeout_ms = 2000
gfn_attempts = 1
max_soft_errors = 8
"""

TARGET_TEMPLATE = """\
[[target]]
id = "{tid}"
listen = "127.0.0.1:{port}"
store_root = "{root}"

"""


@pytest.fixture(scope="session")
def cluster():
    """(gateway_url, run_dir); nodes run as subprocesses via clusterctl."""
    if shutil.which("clusterctl") is None:
        pytest.skip("clusterctl not on PATH; install the batchstore package")
    run_dir = Path(tempfile.mkdtemp(prefix="batchclient-test-"))
    ports = free_port_pairs(4)
    targets = "".join(
        TARGET_TEMPLATE.format(tid=f"t{i:02d}", port=ports[i + 1], root=run_dir / f"t{i:02d}")
        for i in range(3)
    )
    config = run_dir / "cluster.toml"
    config.write_text(
        CONFIG_TEMPLATE.format(proxy_port=ports[0], targets=targets)
    )
    up = subprocess.run(
        ["clusterctl", "up", str(config), "--log-dir", str(run_dir / "logs")],
        cwd=run_dir,
        capture_output=True,
        text=True,
    )
    if up.returncode != 0:
        raise RuntimeError(f"clusterctl up failed:\n{up.stdout}\n{up.stderr}")
    gateway = f"http://127.0.0.1:{ports[0]}"

    deadline = time.monotonic() + 15
    while time.monotonic() < deadline:
        try:
            if requests.get(gateway + "/health", timeout=1).status_code == 200:
                break
        except requests.RequestException:
            time.sleep(0.1)

    yield gateway, run_dir

    subprocess.run(["clusterctl", "down"], cwd=run_dir, capture_output=True)
    shutil.rmtree(run_dir, ignore_errors=True)


@pytest.fixture(scope="session")
def gateway(cluster):
    return cluster[0]


@pytest.fixture
def target_admin(cluster):
    """Admin endpoints of every target, with teardown cleanup."""
    gateway, _ = cluster
    nodes = requests.get(gateway + "/v1/cluster", timeout=5).json()["targets"]
    yield [f"http://{n['endpoint']}" for n in nodes]
    for base in [f"http://{n['endpoint']}" for n in nodes]:
        try:
            requests.post(base + "/v1/admin/pressure", json={"clear": True}, timeout=5)
            requests.post(base + "/v1/admin/delay", json={"clear": True}, timeout=5)
        except requests.RequestException:
            pass
