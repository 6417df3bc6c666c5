"""Compare the numba loop kernels with their numpy twins.

Operator timings run in-process (both kernels are importable side by side).
Full Newton solves depend on the backend chosen at import time, so each
backend runs in its own subprocess with FNONEWTON_NUMBA set accordingly.

    python benchmarks/bench_kernels.py [--repeat 7] [--solves 3]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from fnonewton import kernels
from fnonewton._accel import HAVE_NUMBA
from fnonewton.datagen import build_dataset

SOLVE_SNIPPET = """
import json, sys, time
import numpy as np
from fnonewton._accel import backend_name
from fnonewton.datagen import build_dataset
from fnonewton.gridsearch import naive_guess
from fnonewton.jfnk import newton_solve
n, count, dim = int(sys.argv[1]), int(sys.argv[2]), int(sys.argv[3])
p, alpha0 = (4, 2.0) if dim == 1 else (2, 1.0)
ds = build_dataset(p, alpha0, [n], count + 1, seed=3, split="test", dim=dim)
newton_solve(ds.samples[0].spec, naive_guess(ds.samples[0].spec.grid))  # warm-up / compile
out = []
for s in ds.samples[1:]:
    t0 = time.perf_counter()
    rep = newton_solve(s.spec, naive_guess(s.spec.grid))
    out.append((rep.iterations, time.perf_counter() - t0))
print(json.dumps({"backend": backend_name(), "runs": out}))
"""


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def operator_table(repeat):
    rows = []
    for dim, n in ((1, 100), (1, 400), (1, 1600), (2, 40), (2, 100)):
        p, alpha0 = (4, 2.0) if dim == 1 else (2, 1.0)
        s = build_dataset(p, alpha0, [n], 1, seed=0, dim=dim).samples[0]
        u = s.u + 0.01
        k = np.ascontiguousarray(s.k)
        h = s.spec.grid.h
        if dim == 1:
            loop, vec = kernels._elliptic_1d_loop, kernels._elliptic_1d_np
        else:
            loop, vec = kernels._elliptic_2d_loop, kernels._elliptic_2d_np
        ref = vec(u, k, p, alpha0, h)
        got = loop(u, k, p, alpha0, h)
        err = float(np.abs(got - ref).max() / max(np.abs(ref).max(), 1e-300))
        number = max(1, 20000 // s.spec.grid.size)
        t_loop = best_of(lambda: loop(u, k, p, alpha0, h), repeat, number)
        t_vec = best_of(lambda: vec(u, k, p, alpha0, h), repeat, number)
        rows.append((f"{dim}D N={n}", t_loop, t_vec, err))
    return rows


def solve_backend(flag, n, count, dim):
    env = dict(os.environ, FNONEWTON_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", SOLVE_SNIPPET, str(n), str(count), str(dim)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--solves", type=int, default=3)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba not installed; only the numpy path is available")
        return 1

    print("operator E(u; k), best of", args.repeat)
    print(f"{'case':>12s} {'numba [us]':>12s} {'numpy [us]':>12s} {'speedup':>8s} {'rel diff':>10s}")
    for case, tl, tv, err in operator_table(args.repeat):
        print(f"{case:>12s} {tl * 1e6:12.2f} {tv * 1e6:12.2f} {tv / tl:8.2f} {err:10.1e}")

    print("\nNewton-Krylov solves from the all-ones guess")
    print(f"{'case':>12s} {'backend':>8s} {'mean iters':>11s} {'mean time [s]':>14s}")
    for dim, n in ((1, 100), (2, 24)):
        for flag in ("1", "0"):
            res = solve_backend(flag, n, args.solves, dim)
            its = [r[0] for r in res["runs"]]
            ts = [r[1] for r in res["runs"]]
            print(f"{f'{dim}D N={n}':>12s} {res['backend']:>8s} {np.mean(its):11.1f} {np.mean(ts):14.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
