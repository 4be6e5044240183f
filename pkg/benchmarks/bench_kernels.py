"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--paths 2000] [--repeat 3]

Reports wall time per call and the speedup, and checks that both backends
return the same numbers.
"""

import argparse
import time

import numpy as np

from contagion_hjb import hjb_solver as hs
from contagion_hjb import kernels
from contagion_hjb.filter import SimConfig
from contagion_hjb.model import benchmark
from contagion_hjb.strategy import FeedbackStrategy
from contagion_hjb.verify import utility_samples


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        raise SystemExit("compiled extension not available; build with pip install -e .")

    cfg = benchmark()
    grid = hs.Grid(201, 3000)
    rows = []

    def solve(backend):
        return lambda: hs.recursive_solve(cfg, grid, backend=backend)

    tp, a = best_of(solve("python"), 1)
    tc, b = best_of(solve("cython"), args.repeat)
    diff = max(np.max(np.abs(a[z].w - b[z].w)) for z in a)
    rows.append(("HJB solve, 4 states, 201 x 3000", tp, tc, diff))

    strat = FeedbackStrategy(cfg, b)
    sim = SimConfig(1e-3, 3.0, 0, args.paths)
    for which in ("tildeP", "physical"):
        def mc(backend, which=which):
            return lambda: utility_samples(cfg, sim, strat, 0.5, "00", which=(which,), backend=backend)[which]

        tp, a = best_of(mc("python"), 1)
        tc, b2 = best_of(mc("cython"), args.repeat)
        rows.append((f"{which} estimator, {args.paths} paths x 3000 steps", tp, tc,
                     float(np.max(np.abs(a - b2) / np.abs(a)))))

    print(f"{'kernel':48s} {'python s':>10s} {'cython s':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, tp, tc, d in rows:
        print(f"{name:48s} {tp:10.3f} {tc:10.3f} {tp / tc:8.1f} {d:10.1e}")
    print("(estimator times include drawing the random numbers, which is shared by both backends)")


if __name__ == "__main__":
    main()
