#!/usr/bin/env python3
"""Compare the compiled placement hash kernel against the pure-Python
fallback: raw XXH64 plus highest-random-weight selection over a 16-node map.

Run: python benchmarks/bench_kernels.py [--keys N]
"""

import argparse
import random
import time
from array import array

from batchstore import _kernels_py

try:
    from batchstore import _kernels

    IMPLS = [("compiled", _kernels), ("pure-python", _kernels_py)]
except ImportError:
    print("note: compiled extension not built; benchmarking the fallback only")
    IMPLS = [("pure-python", _kernels_py)]


def bench_xxh64(impl, keys):
    t0 = time.perf_counter()
    for key in keys:
        impl.xxh64(key)
    return time.perf_counter() - t0


def bench_hrw(impl, seeds, keys):
    t0 = time.perf_counter()
    impl.hrw_select_many(seeds, keys)
    return time.perf_counter() - t0


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--keys", type=int, default=100_000)
    args = parser.parse_args()

    rng = random.Random(1)
    keys = [f"bucket\x00obj-{i:08d}".encode() for i in range(args.keys)]
    seeds = array("Q", [rng.getrandbits(64) for _ in range(16)])

    # agreement check before timing anything
    sample = keys[:: max(1, args.keys // 500)]
    answers = [impl.hrw_select_many(seeds, sample) for _, impl in IMPLS]
    assert all(a == answers[0] for a in answers), "kernel implementations disagree"

    print(f"{args.keys} keys, 16 nodes\n")
    print(f"{'kernel':<14}{'xxh64':>14}{'hrw_select':>16}")
    baseline = {}
    for name, impl in IMPLS:
        t_hash = bench_xxh64(impl, keys)
        t_hrw = bench_hrw(impl, seeds, keys)
        baseline.setdefault("hash", t_hash)
        baseline.setdefault("hrw", t_hrw)
        print(
            f"{name:<14}"
            f"{args.keys / t_hash / 1e6:>10.2f} M/s"
            f"{args.keys / t_hrw / 1e6:>12.2f} M/s"
            f"   ({t_hash / baseline['hash']:.1f}x, {t_hrw / baseline['hrw']:.1f}x time)"
        )


if __name__ == "__main__":
    main()
