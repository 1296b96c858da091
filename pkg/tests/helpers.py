"""Shared test utilities: map builders, ownership probing, oracle helpers."""

import io

from batchstore.model import ObjectRef
from batchstore.placement import ClusterMap, NodeInfo, owner_of
from batchstore.tarstream import TarWriter


def make_map(n_targets, version=1, base_port=9000):
    targets = tuple(
        NodeInfo(f"t{i:02d}", f"127.0.0.1:{base_port + 2 * i}", "target")
        for i in range(n_targets)
    )
    proxies = (NodeInfo("p00", "127.0.0.1:8800", "proxy"),)
    return ClusterMap(version=version, targets=targets, proxies=proxies)


def refs_owned_by(cmap, node_id, count, bucket="b", salt=""):
    """Generate `count` refs whose HRW owner is `node_id`."""
    out = []
    i = 0
    while len(out) < count:
        ref = ObjectRef(bucket, f"gen{salt}-{i}")
        if owner_of(cmap, ref) == node_id:
            out.append(ref)
        i += 1
    return out


def build_shard(members: dict[str, bytes]) -> bytes:
    sink = io.BytesIO()
    w = TarWriter(sink)
    for name, data in members.items():
        w.emit_entry(name, data)
    w.finalize()
    return sink.getvalue()
