"""Node process entry point: run one proxy or target from a cluster config."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading

from batchstore.config import ConfigError, load_config
from batchstore.placement import ROLE_PROXY
from batchstore.proxy import ProxyNode
from batchstore.target import TargetNode


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="batchstore-node")
    parser.add_argument("--config", required=True, help="cluster TOML config path")
    parser.add_argument("--id", required=True, help="node id from the config")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=args.log_level.upper(),
        format=f"%(asctime)s %(levelname).1s [{args.id}] %(name)s: %(message)s",
        stream=sys.stderr,
    )

    try:
        config = load_config(args.config)
        node_cfg = config.node_by_id(args.id)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    cls = ProxyNode if node_cfg.role == ROLE_PROXY else TargetNode
    try:
        node = cls(config, args.id, config_path=args.config)
    except OSError as exc:
        print(f"error: cannot start {args.id}: {exc}", file=sys.stderr)
        return 1

    stop = threading.Event()

    def on_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)

    node.start()
    stop.wait()
    node.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
