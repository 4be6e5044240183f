"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records a one-line PASS/FAIL summary that is printed at the end
of the pytest run (or directly when this file is executed as a script).
"""

import time

import numpy as np
import pytest

from contagion_hjb import hjb_solver as hs
from contagion_hjb.filter import SimConfig
from contagion_hjb.model import DistressState, all_states, benchmark, gamma_vec
from contagion_hjb.strategy import FeedbackStrategy, feedback, phi_and_phistar
from contagion_hjb.verify import calibrate_allowance, suboptimality_audit, verification_report

from _support import filter_unbiasedness, oracle_discrepancy, prior_propagated, record

GRID = hs.Grid(201, 3000)


@pytest.fixture(scope="module")
def bench():
    return benchmark()


@pytest.fixture(scope="module")
def solved(bench):
    return hs.recursive_solve(bench, GRID)


def test_criterion_1_closed_form():
    cfg = benchmark(rate=0.05)
    ones = DistressState.ones(2)
    t0 = time.perf_counter()
    s = hs.solve_state(cfg, ones, GRID, hs.SolveOptions(), {})
    elapsed = time.perf_counter() - t0
    err = np.max(np.abs(s.w - 0.3 * 0.05 * (3.0 - s.t)[:, None]))
    ok = err < 1e-6 and elapsed < 10
    record(1, ok, f"max node error {err:.2e} (< 1e-6), runtime {elapsed:.2f} s (< 10 s)")
    assert ok


def test_criterion_2_bounds(bench, solved):
    worst = []
    for z in all_states(2):
        b = hs.bounds(bench, z, solved, GRID)
        w = solved[z].w
        worst.append((z.label, b.L_T <= w.min(), w.max() <= b.U_T, w.min(), w.max(), b.L_T, b.U_T))
    ok = all(lo and hi for _, lo, hi, *_ in worst)
    detail = "; ".join(f"{l}: [{a:.3g}, {b:.3g}] in [{c:.3g}, {d:.3g}]" for l, _, _, a, b, c, d in worst)
    record(2, ok, detail)
    assert ok


def test_criterion_3_stampacchia(bench):
    d = hs.stampacchia_convergence(bench, GRID, (10, 100, 1000, 10000))
    ok = hs.nonincreasing(d, 0.05) and d[-1] < 1e-3
    record(3, ok, "distances " + ", ".join(f"{x:.3g}" for x in d) + " (nonincreasing, last < 1e-3)")
    assert ok


def test_criterion_4_verification(bench, solved):
    t0 = time.perf_counter()
    strat = FeedbackStrategy(bench, solved)
    z0 = DistressState.zeros(2)
    allowance = calibrate_allowance(bench, SimConfig(1e-3, 3.0, 101, 20_000), strat, 0.5, z0)
    sim = SimConfig(1e-3, 3.0, 0, 100_000)
    reports = [verification_report(bench, sim, solved, lam, z0, allowance, strat) for lam in (0.2, 0.5, 0.8)]
    elapsed = time.perf_counter() - t0
    for r in reports:
        print(r.to_text())
    flags = {k: all(r.flags[k] for r in reports) for k in reports[0].flags}
    ok = all(flags.values()) and elapsed < 300
    rel = "; ".join(f"lambda {r.lam0:g}: tildeP {r.mc_tildeP[0] / r.pde_value - 1:+.1%}, "
                    f"physical {r.mc_physical[0] / r.pde_value - 1:+.1%}" for r in reports)
    record(4, ok, f"{flags}; {rel}; runtime {elapsed:.0f} s (< 300 s)")
    assert ok


def test_criterion_5_audit(bench, solved):
    rep = suboptimality_audit(bench, SimConfig(1e-3, 3.0, 5, 20_000), solved, 0.5, "00",
                              scales=(0.0, 0.5, 0.8, 1.2, 2.0), constants=[])
    print(rep.to_text())
    ok = rep.passed and all(r.strictly_worse for r in rep.rows if r.label in ("scale 0", "scale 2"))
    detail = ", ".join(f"{r.label} gap {r.gap / r.gap_stderr:+.1f} se" for r in rep.rows)
    record(5, ok, detail)
    assert ok


def test_criterion_6_filter(bench):
    e1, _ = oracle_discrepancy(bench, 1e-4, 40)
    e2, _ = oracle_discrepancy(bench, 5e-5, 40)
    halves = 0.35 <= e2 / e1 <= 0.65
    n = 100_000
    p, x = filter_unbiasedness(bench, 1e-3, 1.0, n)
    d = p - x
    z_pair = d.mean() / (d.std(ddof=1) / np.sqrt(n))
    z_mart = (p.mean() - prior_propagated(bench, 1.0)) / (p.std(ddof=1) / np.sqrt(n))
    ok = e1 < 0.02 and halves and abs(z_pair) < 3 and abs(z_mart) < 3
    record(6, ok, f"sup gap {e1:.2e} at dt=1e-4 (< 0.02), ratio {e2 / e1:.2f} on halving (0.5 +- 30%), "
                  f"E[p(T)] - P(X_T=1) = {z_pair:+.2f} se, E[p(T)] - p0 e^(QT) = {z_mart:+.2f} se")
    assert ok


def _t0_strategy(cfg, lam, z):
    s = hs.recursive_solve(cfg, GRID)
    return feedback(cfg, s, 0.0, lam, z)


def test_criterion_7_qualitative(bench, solved):
    lam = GRID.lam
    i09 = int(np.argmin(np.abs(lam - 0.9)))
    out = {}
    a = np.array([_t0_strategy(bench.replace(intensity=[[h, .1], [1, .1]]), lam, "00")[i09]
                  for h in (0.6, 1.0, 1.4)])
    out["a"] = bool(np.all(np.diff(a[:, 0]) < 0) and np.all(np.diff(a[:, 1]) > 0))
    pi00 = feedback(bench, solved, 0.0, lam, "00")
    pi10 = feedback(bench, solved, 0.0, lam, "10")
    out["b"] = bool(np.all(pi10[:, 1] <= pi00[:, 1]))
    c = np.array([_t0_strategy(bench.replace(gamma=g), lam, "00") for g in (0.1, 0.3, 0.5, 0.7)])
    out["c"] = bool(np.all(np.diff(c, axis=0) > 0))
    d = np.array([_t0_strategy(bench.replace(volatility=[0.4, v]), lam, "00")[:, 1] for v in (0.4, 0.6, 0.8)])
    out["d"] = bool(np.all(np.diff(d, axis=0) < 0))
    ok = all(out.values())
    record(7, ok, f"{out}; (a) pi_1 at lambda 0.9 over h_1(e_1) = 0.6, 1, 1.4: "
                  + ", ".join(f"{x:.3f}" for x in a[:, 0]) + "; pi_2: " + ", ".join(f"{x:.3f}" for x in a[:, 1]))
    assert ok


def test_criterion_8_reduction():
    homo = benchmark(n_stocks=4, drift=[[1, .5]] * 4, intensity=[[1, .1]] * 4, volatility=[.4] * 4)
    het = benchmark(n_stocks=4, drift=[[1, .5], [1.2, .4], [0.9, .3], [1.1, .6]],
                    intensity=[[1, .1]] * 4, volatility=[.4, .6, .5, .45])
    counts = (hs.reduce_states(homo, [0, 0, 1, 1])[1], hs.reduce_states(homo, [0] * 4)[1],
              hs.reduce_states(het, [0, 1, 2, 3])[1])
    g = hs.Grid(101, 1000)
    full = hs.recursive_solve(homo, g)
    red = hs.recursive_solve(homo, g, groups=[0, 0, 0, 0])
    err = max(np.max(np.abs(full[z].w - red[z].w)) for z in full)
    ok = counts == (9, 5, 16) and err < 1e-10
    record(8, ok, f"solve counts {counts} (expect 9, 5, 16), reduced vs full max diff {err:.1e} (< 1e-10)")
    assert ok


def test_criterion_9_argmax(bench, solved):
    rng = np.random.default_rng(2024)
    states = all_states(2)
    worst = -np.inf
    for _ in range(1000):
        t, lam = rng.uniform(0, 3), rng.uniform(0, 1)
        z = states[rng.integers(4)]
        g = solved[z].gradient(t, lam)
        star = phi_and_phistar(bench, g, t, lam, z, feedback(bench, solved, t, lam, z))[1]
        pis = rng.normal(scale=10.0, size=(1000, 2))
        phi, _ = phi_and_phistar(bench, g, t, lam, z, pis)
        worst = max(worst, float(np.max(phi - star)))
    ok = worst <= 1e-10
    record(9, ok, f"max Phi(pi) - Phi* = {worst:.2e} over 10^6 draws (<= 1e-10)")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
