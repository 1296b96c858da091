"""Local multi-process cluster launcher for integration tests and benchmarks.

Each node runs as its own OS process on loopback so kill-based fault
injection behaves like a real node failure. The handle supports kill and
restart of individual nodes plus full teardown; per-node stderr goes to log
files under the harness log directory.
"""

from __future__ import annotations

import shutil
import signal
import subprocess
import sys
import time
from pathlib import Path

import requests

from batchstore.config import ClusterConfig, load_config


class LaunchError(Exception):
    pass


class ClusterHandle:
    def __init__(self, config: ClusterConfig, config_path: Path, log_dir: Path):
        self.config = config
        self.config_path = Path(config_path)
        self.log_dir = Path(log_dir)
        self.procs: dict[str, subprocess.Popen] = {}
        self._log_files: dict[str, object] = {}

    # -- lifecycle ------------------------------------------------------------

    def _spawn(self, node_id: str) -> None:
        log_path = self.log_dir / f"{node_id}.log"
        log_file = open(log_path, "ab")
        proc = subprocess.Popen(
            [
                sys.executable,
                "-m",
                "batchstore.node",
                "--config",
                str(self.config_path),
                "--id",
                node_id,
            ],
            stdout=log_file,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
        self.procs[node_id] = proc
        self._log_files[node_id] = log_file

    def wait_healthy(self, timeout: float = 15.0) -> None:
        deadline = time.monotonic() + timeout
        pending = {n.id: n for n in self.config.proxies + self.config.targets}
        with requests.Session() as session:
            while pending and time.monotonic() < deadline:
                for node_id, node in list(pending.items()):
                    proc = self.procs.get(node_id)
                    if proc is not None and proc.poll() is not None:
                        raise LaunchError(
                            f"node {node_id} exited with {proc.returncode}; "
                            f"log: {self.log_dir / (node_id + '.log')}\n{self.node_log(node_id)[-2000:]}"
                        )
                    try:
                        r = session.get(f"http://{node.listen}/health", timeout=1.0)
                        # the id check catches two nodes fighting over a port
                        if r.status_code == 200 and r.json().get("id") == node_id:
                            del pending[node_id]
                    except (requests.RequestException, ValueError):
                        pass
                if pending:
                    time.sleep(0.1)
        if pending:
            logs = "\n".join(
                f"--- {nid}:\n{self.node_log(nid)[-1500:]}" for nid in pending
            )
            raise LaunchError(f"nodes never became healthy: {sorted(pending)}\n{logs}")

    def kill(self, node_id: str) -> None:
        """SIGKILL one node, as a real crash would."""
        proc = self.procs.pop(node_id, None)
        if proc is None:
            raise KeyError(node_id)
        proc.kill()
        proc.wait(timeout=10)

    def restart(self, node_id: str, timeout: float = 15.0) -> None:
        if node_id in self.procs:
            self.kill(node_id)
        self._spawn(node_id)
        node = self.config.node_by_id(node_id)
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            try:
                if requests.get(f"http://{node.listen}/health", timeout=1.0).status_code == 200:
                    return
            except requests.RequestException:
                time.sleep(0.1)
        raise LaunchError(f"restarted node {node_id} never became healthy")

    def down(self, keep: bool = False) -> None:
        """Terminate every node; remove store roots unless `keep`."""
        for proc in self.procs.values():
            if proc.poll() is None:
                proc.send_signal(signal.SIGTERM)
        deadline = time.monotonic() + 5
        for proc in self.procs.values():
            remaining = max(0.1, deadline - time.monotonic())
            try:
                proc.wait(timeout=remaining)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=5)
        self.procs.clear()
        for f in self._log_files.values():
            f.close()
        self._log_files.clear()
        if not keep:
            for target in self.config.targets:
                shutil.rmtree(target.store_root, ignore_errors=True)

    # -- helpers -----------------------------------------------------------------

    def node_log(self, node_id: str) -> str:
        path = self.log_dir / f"{node_id}.log"
        try:
            return path.read_text(errors="replace")
        except FileNotFoundError:
            return ""

    @property
    def proxy_url(self) -> str:
        return f"http://{self.config.proxies[0].listen}"

    def target_url(self, node_id: str) -> str:
        return f"http://{self.config.node_by_id(node_id).listen}"

    def metrics(self, node_id: str) -> dict:
        from batchstore.admission import parse_exposition

        r = requests.get(f"{self.target_url(node_id)}/metrics", timeout=5)
        r.raise_for_status()
        return parse_exposition(r.text)

    def metrics_sum(self, name: str) -> float:
        return sum(self.metrics(t.id).get(name, 0) for t in self.config.targets)

    def set_pressure(self, node_id: str, mem=0.0, cpu=0.0, disk=0.0) -> None:
        requests.post(
            f"{self.target_url(node_id)}/v1/admin/pressure",
            json={"mem": mem, "cpu": cpu, "disk": disk},
            timeout=5,
        ).raise_for_status()

    def clear_pressure(self, node_id: str) -> None:
        requests.post(
            f"{self.target_url(node_id)}/v1/admin/pressure", json={"clear": True}, timeout=5
        ).raise_for_status()

    def set_delay(self, node_id: str, min_ms: float, max_ms: float) -> None:
        requests.post(
            f"{self.target_url(node_id)}/v1/admin/delay",
            json={"min_ms": min_ms, "max_ms": max_ms},
            timeout=5,
        ).raise_for_status()

    def clear_delay(self, node_id: str) -> None:
        requests.post(
            f"{self.target_url(node_id)}/v1/admin/delay", json={"clear": True}, timeout=5
        ).raise_for_status()


def launch(config_path: str | Path, log_dir: str | Path | None = None) -> ClusterHandle:
    """Spawn every node in the config and wait for the cluster to be healthy."""
    config_path = Path(config_path)
    config = load_config(config_path)
    log_dir = Path(log_dir) if log_dir else config_path.parent / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    handle = ClusterHandle(config, config_path, log_dir)
    try:
        for node in config.proxies + config.targets:
            handle._spawn(node.id)
        handle.wait_healthy()
    except Exception:
        handle.down(keep=True)
        raise
    return handle
