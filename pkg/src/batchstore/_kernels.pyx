# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled placement hash kernels.

Same XXH64 + highest-random-weight selection as batchstore._kernels_py; the
pure-Python module is the fallback and the two must agree bit for bit.
"""

from cpython.bytes cimport PyBytes_AS_STRING, PyBytes_GET_SIZE
from libc.stdint cimport uint8_t, uint32_t, uint64_t

IMPLEMENTATION = "compiled"

cdef uint64_t P1 = 0x9E3779B185EBCA87ULL
cdef uint64_t P2 = 0xC2B2AE3D27D4EB4FULL
cdef uint64_t P3 = 0x165667B19E3779F9ULL
cdef uint64_t P4 = 0x85EBCA77C2B2AE63ULL
cdef uint64_t P5 = 0x27D4EB2F165667C5ULL


cdef inline uint64_t _rotl(uint64_t x, int r) nogil:
    return (x << r) | (x >> (64 - r))


cdef inline uint64_t _read64(const uint8_t *p) nogil:
    cdef uint64_t v
    v = (<uint64_t>p[0]) | (<uint64_t>p[1]) << 8 | (<uint64_t>p[2]) << 16 \
        | (<uint64_t>p[3]) << 24 | (<uint64_t>p[4]) << 32 | (<uint64_t>p[5]) << 40 \
        | (<uint64_t>p[6]) << 48 | (<uint64_t>p[7]) << 56
    return v


cdef inline uint32_t _read32(const uint8_t *p) nogil:
    return (<uint32_t>p[0]) | (<uint32_t>p[1]) << 8 | (<uint32_t>p[2]) << 16 \
        | (<uint32_t>p[3]) << 24


cdef inline uint64_t _round(uint64_t acc, uint64_t lane) nogil:
    acc += lane * P2
    return _rotl(acc, 31) * P1


cdef uint64_t _xxh64(const uint8_t *data, Py_ssize_t n, uint64_t seed) nogil:
    cdef uint64_t h, v1, v2, v3, v4
    cdef Py_ssize_t i = 0

    if n >= 32:
        v1 = seed + P1 + P2
        v2 = seed + P2
        v3 = seed
        v4 = seed - P1
        while i <= n - 32:
            v1 = _round(v1, _read64(data + i))
            v2 = _round(v2, _read64(data + i + 8))
            v3 = _round(v3, _read64(data + i + 16))
            v4 = _round(v4, _read64(data + i + 24))
            i += 32
        h = _rotl(v1, 1) + _rotl(v2, 7) + _rotl(v3, 12) + _rotl(v4, 18)
        h = ((h ^ _round(0, v1)) * P1) + P4
        h = ((h ^ _round(0, v2)) * P1) + P4
        h = ((h ^ _round(0, v3)) * P1) + P4
        h = ((h ^ _round(0, v4)) * P1) + P4
    else:
        h = seed + P5

    h += <uint64_t>n
    while i + 8 <= n:
        h ^= _round(0, _read64(data + i))
        h = (_rotl(h, 27) * P1) + P4
        i += 8
    if i + 4 <= n:
        h ^= (<uint64_t>_read32(data + i)) * P1
        h = (_rotl(h, 23) * P2) + P3
        i += 4
    while i < n:
        h ^= (<uint64_t>data[i]) * P5
        h = _rotl(h, 11) * P1
        i += 1

    h ^= h >> 33
    h *= P2
    h ^= h >> 29
    h *= P3
    h ^= h >> 32
    return h


def xxh64(bytes data, seed=0):
    """64-bit xxHash of `data`, matching the reference algorithm exactly."""
    return _xxh64(<const uint8_t *>PyBytes_AS_STRING(data),
                  PyBytes_GET_SIZE(data), <uint64_t>seed)


cdef Py_ssize_t _select(const uint64_t[::1] seeds, const uint8_t *key,
                        Py_ssize_t klen) nogil:
    cdef Py_ssize_t best = 0, idx
    cdef uint64_t score, best_score
    best_score = _xxh64(key, klen, seeds[0])
    for idx in range(1, seeds.shape[0]):
        score = _xxh64(key, klen, seeds[idx])
        if score > best_score:
            best_score = score
            best = idx
    return best


def hrw_select(const uint64_t[::1] node_seeds, bytes key):
    """Index of the highest-random-weight winner for `key`.

    Ties resolve to the lowest index; callers keep node lists sorted by id
    so the tie-break is stable cluster-wide.
    """
    if node_seeds.shape[0] == 0:
        raise ValueError("empty node seed list")
    return _select(node_seeds, <const uint8_t *>PyBytes_AS_STRING(key),
                   PyBytes_GET_SIZE(key))


def hrw_select_many(const uint64_t[::1] node_seeds, keys):
    """Vectorized hrw_select over a list of keys."""
    if node_seeds.shape[0] == 0:
        raise ValueError("empty node seed list")
    cdef list out = []
    cdef bytes key
    for key in keys:
        out.append(_select(node_seeds, <const uint8_t *>PyBytes_AS_STRING(key),
                           PyBytes_GET_SIZE(key)))
    return out
