#!/usr/bin/env python3
"""Time the numba kernels against their pure-numpy twins.

Both implementations are called directly (independent of OTA_DISABLE_NUMBA),
numba is warmed up first so compilation is excluded, and each pair is checked
for bit-identical output before timing.

    python benchmarks/bench_kernels.py [--n 1000000] [--experts 3] [--repeat 5] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from otamerge import _accel, kernels


def best_of(fn, args, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n: int, T: int, rng):
    side = int(np.sqrt(n))
    vals = rng.normal(size=(T, n))
    w = rng.uniform(size=(T, n))
    trimmed = np.where(rng.uniform(size=(T, n)) < 0.3, vals, 0.0)
    masks = (rng.uniform(size=(T, n)) < 0.4).astype(np.uint8)
    row, col = rng.uniform(size=side), rng.uniform(size=side)
    d2 = rng.normal(size=(side, side))
    return {
        "ffg_saliency": (vals[0], w[0]),
        "ffg_saliency_factored": (d2, row, col, float(row.sum())),
        "reconstruct": (row, col, float(row.sum())),
        "precond": (w[0], 1e-8),
        "precond_factored": (row, col, float(row.sum()), 1e-8),
        "weighted_average": (vals, w),
        "ties_combine": (trimmed,),
        "maxmin_ratio": (w, 1e-30),
        "overlap_codes": (masks,),
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=1_000_000, help="coordinates per expert")
    p.add_argument("--experts", type=int, default=3)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write results here")
    args = p.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1

    rng = np.random.default_rng(args.seed)
    rows = []
    print(f"n={args.n} experts={args.experts} repeat={args.repeat}")
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  identical")
    for name, inputs in cases(args.n, args.experts, rng).items():
        np_fn, nb_fn = kernels.implementations(name)
        same = np.asarray(np_fn(*inputs)).tobytes() == np.asarray(nb_fn(*inputs)).tobytes()  # also warms up numba
        t_np = best_of(np_fn, inputs, args.repeat)
        t_nb = best_of(nb_fn, inputs, args.repeat)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb, "identical": same})
        print(f"{name:24s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.2f}  {same}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"n": args.n, "experts": args.experts, "results": rows}, f, indent=2)
    return 0 if all(r["identical"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
