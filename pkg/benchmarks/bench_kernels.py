"""Time the numba kernels against their numpy fallbacks.

Usage::

    python3 benchmarks/bench_kernels.py [--queries 400] [--gallery 1600] [--repeat 5]

The first call of each numba kernel is made before timing so JIT compilation
is excluded.  Results from both backends are checked for agreement.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from xmbench import _kernels as K


def workload(q, n, seed):
    rng = np.random.default_rng(seed)
    rel = (rng.random((q, n)) < 0.1).astype(np.uint8)
    # coarse integer scores give realistic tie groups (Hamming or TS rankings)
    scores = -np.sort(-rng.integers(0, 33, (q, n)), axis=1)
    gid = np.zeros((q, n), dtype=np.int64)
    gid[:, 1:] = np.cumsum(scores[:, 1:] != scores[:, :-1], axis=1)
    codes_q = rng.integers(0, 256, (q, 4), dtype=np.uint8)
    codes_g = rng.integers(0, 256, (n, 4), dtype=np.uint8)
    return rel, gid, codes_q, codes_g


def cases(rel, gid, codes_q, codes_g):
    return {
        "ap_sorted": (lambda: K.ap_sorted_numpy(rel), lambda: K.ap_sorted_numba(rel)),
        "expected_ap_sorted": (lambda: K.expected_ap_sorted_numpy(rel, gid),
                               lambda: K.expected_ap_sorted_numba(rel, gid)),
        "cmc_expected": (lambda: K.cmc_accumulate_numpy(rel, gid, True)[0],
                         lambda: K.cmc_accumulate_numba(rel, gid, True)[0]),
        "hamming_32bit": (lambda: K.hamming_numpy(codes_q, codes_g), lambda: K.hamming_numba(codes_q, codes_g)),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--queries", type=int, default=400)
    p.add_argument("--gallery", type=int, default=1600)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="also write the timings to this file")
    args = p.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba backend unavailable (not installed or XMBENCH_DISABLE_NUMBA set)", file=sys.stderr)
        return 1

    rows = []
    for name, (np_fn, nb_fn) in cases(*workload(args.queries, args.gallery, args.seed)).items():
        np.testing.assert_allclose(nb_fn(), np_fn(), rtol=0, atol=1e-9, equal_nan=True)
        t_np, t_nb = best_of(np_fn, args.repeat), best_of(nb_fn, args.repeat)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb})

    print(f"{args.queries} queries x {args.gallery} gallery, best of {args.repeat}")
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<20} {1e3 * r['numpy_s']:10.2f} {1e3 * r['numba_s']:10.2f} {r['speedup']:7.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"queries": args.queries, "gallery": args.gallery, "rows": rows}, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
