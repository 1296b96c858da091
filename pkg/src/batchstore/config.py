"""Cluster configuration: TOML format shared by every node and the harness.

Sections: [cluster] name, [[proxy]] {id, listen}, [[target]] {id, listen,
store_root}, and an optional [tuning] table for the execution knobs. Every
node loads the same file; the peer data listener lives on the node's HTTP
port + 1 by convention.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from batchstore.model import DEFAULT_MAX_BODY_BYTES
from batchstore.placement import ROLE_PROXY, ROLE_TARGET, ClusterMap, NodeInfo


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class TuningConfig:
    rxwait_timeout_ms: int = 10_000
    gfn_attempts: int = 2
    max_soft_errors: int = 8
    readahead_workers: int = 4
    idle_timeout_s: float = 60.0
    mem_critical: float = 0.90
    busy_threshold: float = 0.85
    throttle_step_ms: float = 10.0
    # artifact knobs beyond the core set
    max_body_bytes: int = DEFAULT_MAX_BODY_BYTES
    max_conns_per_peer: int = 8
    connect_timeout_s: float = 2.0
    activation_timeout_s: float = 2.0
    exec_ttl_s: float = 300.0
    mem_budget_mb: int = 0  # 0 = total system memory


@dataclass(frozen=True)
class NodeConfig:
    id: str
    listen: str
    role: str
    store_root: str | None = None

    @property
    def endpoint(self) -> str:
        return self.listen

    @property
    def host(self) -> str:
        return self.listen.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.listen.rpartition(":")[2])

    @property
    def peer_port(self) -> int:
        return self.port + 1

    @property
    def peer_endpoint(self) -> str:
        return f"{self.host}:{self.peer_port}"


@dataclass(frozen=True)
class ClusterConfig:
    name: str
    proxies: tuple[NodeConfig, ...]
    targets: tuple[NodeConfig, ...]
    tuning: TuningConfig = field(default_factory=TuningConfig)

    def node_by_id(self, node_id: str) -> NodeConfig:
        for n in self.proxies + self.targets:
            if n.id == node_id:
                return n
        raise ConfigError(f"no node {node_id!r} in cluster {self.name!r}")

    def cluster_map(self, version: int = 1) -> ClusterMap:
        return ClusterMap(
            version=version,
            targets=tuple(NodeInfo(t.id, t.listen, ROLE_TARGET) for t in self.targets),
            proxies=tuple(NodeInfo(p.id, p.listen, ROLE_PROXY) for p in self.proxies),
        )


def _node(raw: dict, role: str, path) -> NodeConfig:
    for key in ("id", "listen"):
        if key not in raw:
            raise ConfigError(f"{path}: [[{role}]] entry missing {key!r}")
    store_root = raw.get("store_root")
    if role == ROLE_TARGET and not store_root:
        raise ConfigError(f"{path}: target {raw['id']!r} missing store_root")
    unknown = set(raw) - {"id", "listen", "store_root"}
    if unknown:
        raise ConfigError(f"{path}: [[{role}]] {raw['id']!r} has unknown keys {sorted(unknown)}")
    return NodeConfig(id=raw["id"], listen=raw["listen"], role=role, store_root=store_root)


def load_config(path: str | Path) -> ClusterConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        # tomllib messages carry line/column diagnostics
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, path)


def parse_config(doc: dict, path="<config>") -> ClusterConfig:
    if "cluster" not in doc or "name" not in doc["cluster"]:
        raise ConfigError(f"{path}: missing [cluster] section with a name")
    proxies = [_node(p, ROLE_PROXY, path) for p in doc.get("proxy", [])]
    targets = [_node(t, ROLE_TARGET, path) for t in doc.get("target", [])]
    if not proxies:
        raise ConfigError(f"{path}: at least one [[proxy]] is required")
    if not targets:
        raise ConfigError(f"{path}: at least one [[target]] is required")

    seen: set[str] = set()
    for n in proxies + targets:
        if n.id in seen:
            raise ConfigError(f"{path}: duplicate node id {n.id!r}")
        seen.add(n.id)

    tuning_raw = doc.get("tuning", {})
    known = {f.name for f in fields(TuningConfig)}
    unknown = set(tuning_raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown [tuning] keys {sorted(unknown)}")
    tuning = TuningConfig(**tuning_raw)

    return ClusterConfig(
        name=doc["cluster"]["name"],
        proxies=tuple(proxies),
        targets=tuple(targets),
        tuning=tuning,
    )


def render_config(
    name: str,
    proxies: list[dict],
    targets: list[dict],
    tuning: dict | None = None,
) -> str:
    """TOML text for a cluster; the harness and tests generate configs with it."""
    lines = ["[cluster]", f'name = "{name}"', ""]
    for p in proxies:
        lines += ["[[proxy]]", f'id = "{p["id"]}"', f'listen = "{p["listen"]}"', ""]
    for t in targets:
        lines += [
            "[[target]]",
            f'id = "{t["id"]}"',
            f'listen = "{t["listen"]}"',
            f'store_root = "{t["store_root"]}"',
            "",
        ]
    if tuning:
        lines.append("[tuning]")
        for key, value in tuning.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
