"""Pure-Python fallback for the placement hash kernels.

Implements XXH64 and highest-random-weight selection with results identical
to the compiled batchstore._kernels extension; the differential test suite
holds the two in lockstep. Placement across nodes depends on every process
computing the same scores, so any change here is a wire-format change.
"""

import struct

IMPLEMENTATION = "pure-python"

_P1 = 0x9E3779B185EBCA87
_P2 = 0xC2B2AE3D27D4EB4F
_P3 = 0x165667B19E3779F9
_P4 = 0x85EBCA77C2B2AE63
_P5 = 0x27D4EB2F165667C5
_MASK = 0xFFFFFFFFFFFFFFFF

_unpack_q = struct.Struct("<Q").unpack_from
_unpack_i = struct.Struct("<I").unpack_from


def _rotl(x: int, r: int) -> int:
    return ((x << r) | (x >> (64 - r))) & _MASK


def _round(acc: int, lane: int) -> int:
    acc = (acc + lane * _P2) & _MASK
    return (_rotl(acc, 31) * _P1) & _MASK


def xxh64(data: bytes, seed: int = 0) -> int:
    """64-bit xxHash of `data`, matching the reference algorithm exactly."""
    n = len(data)
    i = 0
    if n >= 32:
        v1 = (seed + _P1 + _P2) & _MASK
        v2 = (seed + _P2) & _MASK
        v3 = seed & _MASK
        v4 = (seed - _P1) & _MASK
        limit = n - 32
        while i <= limit:
            v1 = _round(v1, _unpack_q(data, i)[0])
            v2 = _round(v2, _unpack_q(data, i + 8)[0])
            v3 = _round(v3, _unpack_q(data, i + 16)[0])
            v4 = _round(v4, _unpack_q(data, i + 24)[0])
            i += 32
        h = (_rotl(v1, 1) + _rotl(v2, 7) + _rotl(v3, 12) + _rotl(v4, 18)) & _MASK
        for v in (v1, v2, v3, v4):
            h = (((h ^ _round(0, v)) * _P1) + _P4) & _MASK
    else:
        h = (seed + _P5) & _MASK

    h = (h + n) & _MASK
    while i + 8 <= n:
        h ^= _round(0, _unpack_q(data, i)[0])
        h = ((_rotl(h, 27) * _P1) + _P4) & _MASK
        i += 8
    if i + 4 <= n:
        h ^= (_unpack_i(data, i)[0] * _P1) & _MASK
        h = ((_rotl(h, 23) * _P2) + _P3) & _MASK
        i += 4
    while i < n:
        h ^= (data[i] * _P5) & _MASK
        h = (_rotl(h, 11) * _P1) & _MASK
        i += 1

    h ^= h >> 33
    h = (h * _P2) & _MASK
    h ^= h >> 29
    h = (h * _P3) & _MASK
    h ^= h >> 32
    return h


def hrw_select(node_seeds, key: bytes) -> int:
    """Index of the highest-random-weight winner for `key`.

    `node_seeds` is a sequence of per-node 64-bit seeds (one xxh64 of the
    node id each). Ties resolve to the lowest index; callers keep node lists
    sorted by id so the tie-break is stable cluster-wide.
    """
    best = -1
    best_score = -1
    for idx, seed in enumerate(node_seeds):
        score = xxh64(key, seed)
        if score > best_score:
            best_score = score
            best = idx
    if best < 0:
        raise ValueError("empty node seed list")
    return best


def hrw_select_many(node_seeds, keys) -> list:
    """Vectorized hrw_select over a list of keys."""
    return [hrw_select(node_seeds, key) for key in keys]
