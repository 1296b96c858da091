"""clusterctl: bring a local cluster up/down and kill/restart nodes.

State (pids, config path) lives in .batchstore-cluster.json in the working
directory so subcommands can find the running cluster.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import time
from pathlib import Path

from batchstore.config import ConfigError, load_config
from batchstore.harness import ClusterHandle, LaunchError, launch

STATE_FILE = ".batchstore-cluster.json"


def _save_state(handle: ClusterHandle) -> None:
    state = {
        "config": str(handle.config_path.resolve()),
        "log_dir": str(handle.log_dir.resolve()),
        "pids": {node_id: proc.pid for node_id, proc in handle.procs.items()},
    }
    Path(STATE_FILE).write_text(json.dumps(state, indent=2))


def _load_state() -> dict:
    try:
        return json.loads(Path(STATE_FILE).read_text())
    except FileNotFoundError:
        print("error: no running cluster (state file missing); run `clusterctl up` first",
              file=sys.stderr)
        raise SystemExit(2)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
        return True
    except OSError:
        return False


def cmd_up(args) -> int:
    try:
        handle = launch(args.config, log_dir=args.log_dir)
    except (ConfigError, LaunchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _save_state(handle)
    print(f"cluster '{handle.config.name}' up:")
    for node in handle.config.proxies + handle.config.targets:
        print(f"  {node.role:6s} {node.id:8s} http://{node.listen}")
    print(f"logs: {handle.log_dir}")
    return 0


def cmd_down(args) -> int:
    state = _load_state()
    config = load_config(state["config"])
    for node_id, pid in state["pids"].items():
        if _alive(pid):
            os.kill(pid, signal.SIGTERM)
    deadline = time.monotonic() + 5
    while time.monotonic() < deadline and any(_alive(p) for p in state["pids"].values()):
        time.sleep(0.1)
    for pid in state["pids"].values():
        if _alive(pid):
            os.kill(pid, signal.SIGKILL)
    if not args.keep:
        import shutil

        for target in config.targets:
            shutil.rmtree(target.store_root, ignore_errors=True)
    Path(STATE_FILE).unlink(missing_ok=True)
    print("cluster down")
    return 0


def cmd_kill(args) -> int:
    state = _load_state()
    pid = state["pids"].get(args.id)
    if pid is None:
        print(f"error: unknown node {args.id}", file=sys.stderr)
        return 2
    if _alive(pid):
        os.kill(pid, signal.SIGKILL)
        print(f"killed {args.id} (pid {pid})")
    else:
        print(f"{args.id} already dead")
    return 0


def cmd_restart(args) -> int:
    import subprocess

    state = _load_state()
    pid = state["pids"].get(args.id)
    if pid is None:
        print(f"error: unknown node {args.id}", file=sys.stderr)
        return 2
    if _alive(pid):
        os.kill(pid, signal.SIGKILL)
        time.sleep(0.2)
    log_path = Path(state["log_dir"]) / f"{args.id}.log"
    with open(log_path, "ab") as log_file:
        proc = subprocess.Popen(
            [sys.executable, "-m", "batchstore.node", "--config", state["config"], "--id", args.id],
            stdout=log_file,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
    state["pids"][args.id] = proc.pid
    Path(STATE_FILE).write_text(json.dumps(state, indent=2))
    print(f"restarted {args.id} (pid {proc.pid})")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="clusterctl")
    sub = parser.add_subparsers(dest="command", required=True)

    p_up = sub.add_parser("up", help="launch a cluster from a config file")
    p_up.add_argument("config")
    p_up.add_argument("--log-dir", default=None)
    p_up.set_defaults(func=cmd_up)

    p_down = sub.add_parser("down", help="stop the running cluster")
    p_down.add_argument("--keep", action="store_true", help="keep store directories")
    p_down.set_defaults(func=cmd_down)

    p_kill = sub.add_parser("kill", help="SIGKILL one node")
    p_kill.add_argument("id")
    p_kill.set_defaults(func=cmd_kill)

    p_restart = sub.add_parser("restart", help="restart one node")
    p_restart.add_argument("id")
    p_restart.set_defaults(func=cmd_restart)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
