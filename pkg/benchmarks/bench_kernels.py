"""Compiled vs NumPy fallback kernels on the toy expert pyramid.

    python benchmarks/bench_kernels.py [--points 65536] [--repeats 5]

Prints the best wall time of encode, encode_backward and adam_update per
backend and the speedup of the compiled kernels.
"""

import argparse
import time

import numpy as np

from hashmoe import _backend
from hashmoe.experts import pyramid_configs
from hashmoe.hash_grid import HashTableSet


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--points", type=int, default=65536)
    ap.add_argument("--experts", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    cfgs = pyramid_configs(args.experts, table_size=2**14, base_range=(16, 64), max_range=(512, 4096))
    tables = HashTableSet(cfgs, rng=np.random.default_rng(0), init_scale=1.0)
    lay = tables.layout
    rng = np.random.default_rng(1)
    pts = rng.random((args.points, 3)).astype(np.float32)
    ids = rng.integers(0, args.experts, args.points).astype(np.int32)
    dfeat = rng.normal(size=(args.points, tables.out_dim)).astype(np.float32)
    flat = tables.data.reshape(-1)
    grad = rng.normal(size=flat.shape).astype(np.float32)

    names = ["python"] + (["compiled"] if _backend.NAME == "compiled" else [])
    results = {}
    for name in names:
        k = _backend.get(name)
        out = np.zeros((args.points, tables.out_dim), np.float32)
        g = np.zeros_like(tables.data)
        p, m, v = flat.copy(), np.zeros_like(flat), np.zeros_like(flat)
        results[name] = {
            "encode": best_of(lambda: k.encode(tables.data, pts, ids, lay.res, lay.entries, lay.offsets, out),
                              args.repeats),
            "encode_backward": best_of(
                lambda: k.encode_backward(g, pts, ids, lay.res, lay.entries, lay.offsets, dfeat), args.repeats),
            "adam_update": best_of(lambda: k.adam_update(p, grad, m, v, 1e-3, 0.9, 0.999, 1e-15, 0.1, 0.001),
                                   args.repeats),
        }

    print(f"{args.points} points, {args.experts} experts x {cfgs[0].levels} levels, {flat.size} table floats")
    print(f"{'kernel':<18}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for kernel in results[names[0]]:
        row = f"{kernel:<18}" + "".join(f"{results[n][kernel] * 1e3:>10.2f}ms" for n in names)
        if len(names) == 2:
            row += f"{results['python'][kernel] / results['compiled'][kernel]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
