"""Harness and clusterctl: launch, teardown, fault hooks, state files."""

import os
from pathlib import Path

import pytest
import requests

from batchstore import clusterctl
from batchstore.config import load_config, render_config
from batchstore.harness import LaunchError, launch
from tests.clientlib import free_port_pairs


def write_config(root: Path, n_targets=2, tuning=None):
    ports = free_port_pairs(n_targets + 1)
    text = render_config(
        "hx",
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
    path = root / "cluster.toml"
    path.write_text(text)
    return path


def alive(pid):
    try:
        os.kill(pid, 0)
        return True
    except OSError:
        return False


def test_launch_and_down_clean(tmp_path):
    config_path = write_config(tmp_path)
    handle = launch(config_path, log_dir=tmp_path / "logs")
    try:
        r = requests.get(handle.proxy_url + "/v1/cluster", timeout=5)
        assert r.json()["version"] == 1
        assert len(r.json()["targets"]) == 2
        pids = {nid: p.pid for nid, p in handle.procs.items()}
        stores = [Path(t.store_root) for t in handle.config.targets]
        assert all(s.exists() for s in stores)
    finally:
        handle.down()
    assert all(not alive(p) for p in pids.values())
    assert all(not s.exists() for s in stores)


def test_down_keep_preserves_stores(tmp_path):
    config_path = write_config(tmp_path)
    handle = launch(config_path, log_dir=tmp_path / "logs")
    stores = [Path(t.store_root) for t in handle.config.targets]
    handle.down(keep=True)
    assert all(s.exists() for s in stores)


def test_kill_and_restart(tmp_path):
    config_path = write_config(tmp_path)
    handle = launch(config_path, log_dir=tmp_path / "logs")
    try:
        victim = handle.config.targets[0]
        handle.kill(victim.id)
        with pytest.raises(requests.RequestException):
            requests.get(f"http://{victim.listen}/health", timeout=0.5)
        handle.restart(victim.id)
        r = requests.get(f"http://{victim.listen}/health", timeout=5)
        assert r.json()["id"] == victim.id
    finally:
        handle.down()


def test_launch_failure_reports_node(tmp_path):
    ports = free_port_pairs(2)
    # two nodes on the same port cannot both come up
    text = render_config(
        "broken",
        proxies=[{"id": "p00", "listen": f"127.0.0.1:{ports[0]}"}],
        targets=[
            {"id": "t00", "listen": f"127.0.0.1:{ports[1]}", "store_root": str(tmp_path / "a")},
            {"id": "t01", "listen": f"127.0.0.1:{ports[1]}", "store_root": str(tmp_path / "b")},
        ],
    )
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(LaunchError):
        launch(path, log_dir=tmp_path / "logs")


def test_clusterctl_lifecycle(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    config_path = write_config(tmp_path)

    assert clusterctl.main(["up", str(config_path), "--log-dir", str(tmp_path / "logs")]) == 0
    out = capsys.readouterr().out
    assert "up:" in out
    state_path = tmp_path / clusterctl.STATE_FILE
    assert state_path.exists()

    config = load_config(config_path)
    proxy = config.proxies[0]
    assert requests.get(f"http://{proxy.listen}/health", timeout=5).status_code == 200

    target = config.targets[0]
    assert clusterctl.main(["kill", target.id]) == 0
    with pytest.raises(requests.RequestException):
        requests.get(f"http://{target.listen}/health", timeout=0.5)

    assert clusterctl.main(["restart", target.id]) == 0
    deadline = 30
    import time

    for _ in range(deadline * 10):
        try:
            if requests.get(f"http://{target.listen}/health", timeout=0.5).status_code == 200:
                break
        except requests.RequestException:
            time.sleep(0.1)
    else:
        raise AssertionError("restarted node never came back")

    assert clusterctl.main(["down"]) == 0
    assert not state_path.exists()
    assert not Path(config.targets[0].store_root).exists()


def test_clusterctl_down_without_state(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit):
        clusterctl.main(["down"])
