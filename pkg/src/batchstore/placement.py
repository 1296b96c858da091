"""Deterministic object-to-target ownership and per-request DT selection.

Placement uses highest-random-weight (rendezvous) hashing: per key, every
target gets a 64-bit score and the maximum wins. Membership changes re-map
only keys owned by the node that joined or left. All functions are pure;
a ClusterMap is an immutable snapshot and map updates publish a new one.
"""

from __future__ import annotations

from array import array
from dataclasses import dataclass, field

from batchstore.kernels import hrw_select, hrw_select_many, xxh64
from batchstore.model import ObjectRef

ROLE_PROXY = "proxy"
ROLE_TARGET = "target"


@dataclass(frozen=True)
class NodeInfo:
    id: str
    endpoint: str  # host:port of the HTTP listener
    role: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("node id must be non-empty")
        if self.role not in (ROLE_PROXY, ROLE_TARGET):
            raise ValueError(f"unknown role {self.role!r}")
        host, _, port = self.endpoint.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"endpoint must be host:port, got {self.endpoint!r}")

    @property
    def host(self) -> str:
        return self.endpoint.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.endpoint.rpartition(":")[2])


@dataclass(frozen=True)
class ClusterMap:
    """Versioned membership snapshot. Targets are kept sorted by id so the
    HRW tie-break (lowest index) is identical on every node."""

    version: int
    targets: tuple[NodeInfo, ...]
    proxies: tuple[NodeInfo, ...]
    _target_seeds: array = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        targets = tuple(sorted(self.targets, key=lambda n: n.id))
        proxies = tuple(sorted(self.proxies, key=lambda n: n.id))
        ids = [n.id for n in targets] + [n.id for n in proxies]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids in cluster map")
        if not targets:
            raise ValueError("cluster map needs at least one target")
        if not proxies:
            raise ValueError("cluster map needs at least one proxy")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "proxies", proxies)
        seeds = array("Q", (xxh64(n.id.encode()) for n in targets))
        object.__setattr__(self, "_target_seeds", seeds)

    def target_by_id(self, node_id: str) -> NodeInfo:
        for n in self.targets:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def to_wire(self) -> dict:
        return {
            "version": self.version,
            "proxies": [{"id": n.id, "endpoint": n.endpoint} for n in self.proxies],
            "targets": [{"id": n.id, "endpoint": n.endpoint} for n in self.targets],
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "ClusterMap":
        return cls(
            version=obj["version"],
            targets=tuple(
                NodeInfo(t["id"], t["endpoint"], ROLE_TARGET) for t in obj["targets"]
            ),
            proxies=tuple(
                NodeInfo(p["id"], p["endpoint"], ROLE_PROXY) for p in obj["proxies"]
            ),
        )


def placement_key(ref: ObjectRef) -> bytes:
    """Ownership key for an entry. archpath is excluded so every member of a
    shard shares the shard's owner."""
    return ref.bucket.encode() + b"\x00" + ref.objname.encode()


def owner_of(cmap: ClusterMap, ref: ObjectRef) -> str:
    """Id of the target owning `ref`."""
    return cmap.targets[hrw_select(cmap._target_seeds, placement_key(ref))].id


def owners_of(cmap: ClusterMap, refs) -> list[str]:
    """Vectorized owner_of; one id per ref, in order."""
    keys = [placement_key(r) for r in refs]
    return [cmap.targets[i].id for i in hrw_select_many(cmap._target_seeds, keys)]


def select_dt_default(cmap: ClusterMap, request_seed: str) -> str:
    """Default DT choice: HRW over an opaque per-request seed. The request
    body is never inspected on this path."""
    return cmap.targets[hrw_select(cmap._target_seeds, request_seed.encode())].id


def select_dt_colocated(cmap: ClusterMap, entries) -> str:
    """DT owning the largest number of entries; ties go to the smallest id."""
    counts: dict[str, int] = {}
    for owner in owners_of(cmap, entries):
        counts[owner] = counts.get(owner, 0) + 1
    if not counts:
        raise ValueError("no entries")
    # targets are sorted by id, so the first max is the smallest id
    best_id = ""
    best_count = -1
    for node in cmap.targets:
        c = counts.get(node.id, 0)
        if c > best_count:
            best_count = c
            best_id = node.id
    return best_id


def partition_entries(
    cmap: ClusterMap, entries
) -> dict[str, list[tuple[int, ObjectRef]]]:
    """Group indexed entries by owning target; indices ascend within each list."""
    out: dict[str, list[tuple[int, ObjectRef]]] = {}
    for idx, owner in enumerate(owners_of(cmap, entries)):
        out.setdefault(owner, []).append((idx, entries[idx]))
    return out
