"""Monte Carlo checks of the PDE value.

Two estimators of the optimal expected utility:

* reference measure: (v^g/g) E[exp(-g int eta_tilde)], simulating the
  controlled filter directly;
* physical measure: V_T^g / g along simulated truth paths where the strategy
  only sees the filter.

Both read the same per-path random streams, so comparisons across strategies
or step sizes use common random numbers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from . import kernels
from .filter import EXIT_TOL, FilterError, SimConfig, _as_probs, _pointwise, draw_paths, kernel_tables
from .model import DistressState, MarketConfig, as_state
from .strategy import ConstantStrategy, FeedbackStrategy, value_terminal_utility

BATCH = 500
ROUNDOFF = 1e-12


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int

    @classmethod
    def of(cls, x: NDArray) -> "Estimate":
        x = np.asarray(x, dtype=float)
        se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")
        return cls(float(np.mean(x)), se, int(x.size))


def _strategy_args(strategy):
    if hasattr(strategy, "kernel_args"):
        return strategy.kernel_args(), None
    return None, strategy


def _batched(fn, n_paths: int, threads: int, batch: int):
    starts = list(range(0, n_paths, batch))
    spans = [(s, min(s + batch, n_paths)) for s in starts]
    if threads <= 1 or len(spans) == 1:
        parts = [fn(a, b) for a, b in spans]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(lambda ab: fn(*ab), spans))
    return tuple(np.concatenate([p[k] for p in parts]) for k in range(len(parts[0])))


def utility_samples(cfg: MarketConfig, sim: SimConfig, strategy, lam0, z0, which=("tildeP", "physical"),
                    compensated: bool = True, factor: int = 1, milstein: bool = True,
                    backend: str | None = None, threads: int = 1, batch: int = BATCH):
    """Per-path utilities for the requested estimators, in path order.

    ``factor`` > 1 runs at step factor * sim.dt on the same Brownian paths.
    Returns a dict name -> array.
    """
    sim.check(cfg)
    z0 = as_state(z0, cfg.n_stocks)
    p0 = _as_probs(cfg, lam0)
    mu, h, bh, vol, gen = kernel_tables(cfg)
    kargs, fn = _strategy_args(strategy)
    dt = sim.dt * factor
    v, g = cfg.initial_wealth, cfg.gamma
    need_chain = "physical" in which

    def run(a, b):
        d = draw_paths(cfg, sim, a, b, p0, chain=need_chain)
        normals = d.normals
        regimes = d.regimes
        if factor > 1:
            from .filter import coarsen_normals

            normals = coarsen_normals(normals, factor)
            if regimes is not None:
                regimes = np.ascontiguousarray(regimes[:, ::factor])
        out = []
        for name in which:
            if name == "tildeP":
                if fn is None:
                    acc, _, st = kernels.get("tildeP_batch", backend)(
                        normals, d.thetas, p0, z0.index, dt, int(compensated), mu, h, bh, vol, gen,
                        cfg.rate, g, *kargs, EXIT_TOL)
                else:
                    from ._fallback import tildeP_batch

                    acc, _, st = tildeP_batch(normals, d.thetas, p0, z0.index, dt, int(compensated), mu, h,
                                              bh, vol, gen, cfg.rate, g, 0, 1.0, None, None, 1.0, 1.0,
                                              EXIT_TOL, pi_fn=_batch_fn(cfg, fn))
                u = v**g / g * np.exp(-g * np.asarray(acc))
            elif name == "physical":
                if fn is None:
                    lv, _, _, st = kernels.get("physical_batch", backend)(
                        normals, d.thetas, regimes, p0, z0.index, dt, mu, h, bh, vol, gen, cfg.rate, g,
                        *kargs, EXIT_TOL, int(milstein))
                else:
                    from ._fallback import physical_batch

                    lv, _, _, st = physical_batch(normals, d.thetas, regimes, p0, z0.index, dt, mu, h, bh,
                                                  vol, gen, cfg.rate, g, 0, 1.0, None, None, 1.0, 1.0,
                                                  EXIT_TOL, int(milstein), pi_fn=_batch_fn(cfg, fn))
                u = v**g / g * np.exp(g * np.asarray(lv))
            else:
                raise ValueError(f"unknown estimator {name!r}")
            if np.any(np.asarray(st)):
                raise FilterError(f"filter left the simplex on {int(np.sum(st))} paths; reduce dt")
            out.append(u)
        return tuple(out)

    arrays = _batched(run, sim.n_paths, threads, batch)
    return dict(zip(which, arrays))


def _batch_fn(cfg, fn):
    return fn.batch if hasattr(fn, "batch") else _pointwise(cfg, fn)


def estimate_objective_tildeP(cfg: MarketConfig, sim: SimConfig, strategy, lam0, z0, **kw) -> tuple[float, float]:
    e = Estimate.of(utility_samples(cfg, sim, strategy, lam0, z0, which=("tildeP",), **kw)["tildeP"])
    return e.mean, e.stderr


def simulate_wealth_physical(cfg: MarketConfig, sim: SimConfig, strategy, lam0, z0, **kw) -> tuple[float, float]:
    e = Estimate.of(utility_samples(cfg, sim, strategy, lam0, z0, which=("physical",), **kw)["physical"])
    return e.mean, e.stderr


# ---------------------------------------------------------------------------
# discretization allowance


@dataclass(frozen=True)
class Allowance:
    """Per-estimator constant C with bias(dt) <= C dt, from a dt vs 2 dt study."""

    C: dict
    dt: float
    n_paths: int
    shifts: dict

    def at(self, name: str, dt: float) -> float:
        return self.C[name] * dt


def calibrate_allowance(cfg: MarketConfig, sim: SimConfig, strategy, lam0, z0,
                        which=("tildeP", "physical"), **kw) -> Allowance:
    """C = (|m(2dt) - m(dt)| + 2 se) / dt with paired (common-noise) differences.

    For a first-order scheme m(2dt) - m(dt) estimates the bias at dt.
    """
    fine = utility_samples(cfg, sim, strategy, lam0, z0, which=which, **kw)
    coarse = utility_samples(cfg, sim, strategy, lam0, z0, which=which, factor=2, **kw)
    C, shifts = {}, {}
    for name in which:
        d = Estimate.of(coarse[name] - fine[name])
        shifts[name] = (d.mean, d.stderr)
        C[name] = (abs(d.mean) + 2.0 * d.stderr) / sim.dt
    return Allowance(C, sim.dt, sim.n_paths, shifts)


# ---------------------------------------------------------------------------
# report


@dataclass
class VerificationReport:
    pde_value: float
    mc_tildeP: tuple[float, float]
    mc_physical: tuple[float, float]
    n_paths: int
    dt: float
    lam0: float
    z0: str
    allowance: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def evaluate(self) -> "VerificationReport":
        pt, st = self.mc_tildeP
        pp, sp = self.mc_physical
        at = self.allowance.get("tildeP", 0.0)
        ap = self.allowance.get("physical", 0.0)
        eps = ROUNDOFF * max(1.0, abs(self.pde_value))  # deterministic cases have zero stderr
        self.flags = {
            "tildeP_vs_pde": abs(pt - self.pde_value) <= 3 * st + at + eps,
            "physical_vs_pde": abs(pp - self.pde_value) <= 3 * sp + ap + eps,
            "tildeP_vs_physical": abs(pt - pp) <= 3 * math.hypot(st, sp) + at + ap + eps,
        }
        return self

    def rows(self):
        return [
            ("lambda0", self.lam0), ("z0", self.z0), ("n_paths", self.n_paths), ("dt", self.dt),
            ("pde_value", self.pde_value),
            ("tildeP_mean", self.mc_tildeP[0]), ("tildeP_stderr", self.mc_tildeP[1]),
            ("physical_mean", self.mc_physical[0]), ("physical_stderr", self.mc_physical[1]),
            *[(f"allowance_{k}", v) for k, v in self.allowance.items()],
            *[(f"pass_{k}", v) for k, v in self.flags.items()],
        ]

    def to_text(self) -> str:
        pt, st = self.mc_tildeP
        pp, sp = self.mc_physical
        lines = [
            f"start: lambda={self.lam0:g}, z={self.z0}; {self.n_paths} paths, dt={self.dt:g}",
            f"  PDE value          {self.pde_value:.10g}",
            f"  reference measure  {pt:.10g} +- {st:.3g}  ({(pt / self.pde_value - 1) * 100:+.3f}%)",
            f"  physical measure   {pp:.10g} +- {sp:.3g}  ({(pp / self.pde_value - 1) * 100:+.3f}%)",
        ]
        for k, v in self.flags.items():
            lines.append(f"  {k:20s} {'PASS' if v else 'FAIL'}")
        return "\n".join(lines)


def verification_report(cfg: MarketConfig, sim: SimConfig, surfaces, lam0: float, z0,
                        allowance: Allowance | None = None, strategy=None, **kw) -> VerificationReport:
    z0 = as_state(z0, cfg.n_stocks)
    strategy = strategy or FeedbackStrategy(cfg, surfaces)
    pde = float(value_terminal_utility(cfg, surfaces, lam0, z0))
    s = utility_samples(cfg, sim, strategy, lam0, z0, **kw)
    allow = {k: allowance.at(k, sim.dt) for k in allowance.C} if allowance else {}
    e1, e2 = Estimate.of(s["tildeP"]), Estimate.of(s["physical"])
    rep = VerificationReport(pde, (e1.mean, e1.stderr), (e2.mean, e2.stderr), sim.n_paths, sim.dt,
                             float(lam0), z0.label, allow)
    return rep.evaluate()


def write_reports_csv(path, reports: Sequence[VerificationReport]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["field", *[f"run_{i}" for i in range(len(reports))]])
        table = [r.rows() for r in reports]
        for k in range(len(table[0])):
            w.writerow([table[0][k][0], *[_fmt(t[k][1]) for t in table]])


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ---------------------------------------------------------------------------
# suboptimality audit


@dataclass(frozen=True)
class AuditRow:
    label: str
    mean: float
    stderr: float
    gap: float  # optimal minus perturbed
    gap_stderr: float

    @property
    def ok(self) -> bool:
        return self.gap >= -3.0 * self.gap_stderr

    @property
    def strictly_worse(self) -> bool:
        return self.gap > 3.0 * self.gap_stderr


@dataclass
class AuditReport:
    optimal: Estimate
    rows: list[AuditRow]

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.rows)

    def to_text(self) -> str:
        out = [f"optimal  {self.optimal.mean:.8g} +- {self.optimal.stderr:.3g}"]
        for r in self.rows:
            out.append(f"{r.label:24s} {r.mean:.8g} +- {r.stderr:.3g}  gap {r.gap:.4g} +- {r.gap_stderr:.3g}"
                       f"  {'ok' if r.ok else 'BEATS OPTIMAL'}")
        return "\n".join(out)


def suboptimality_audit(cfg: MarketConfig, sim: SimConfig, surfaces, lam0: float, z0,
                        scales: Sequence[float] = (0.0, 0.5, 0.8, 1.2, 2.0),
                        constants: Sequence[Sequence[float]] | None = None, **kw) -> AuditReport:
    """Compare the optimal feedback against perturbations on common random numbers."""
    z0 = as_state(z0, cfg.n_stocks)
    opt = FeedbackStrategy(cfg, surfaces)
    if constants is None:
        constants = [np.zeros(cfg.n_stocks), opt(0.0, lam0, z0)]
    base = utility_samples(cfg, sim, opt, lam0, z0, which=("tildeP",), **kw)["tildeP"]
    rows = []
    cands = [(f"scale {c:g}", opt.scaled(c)) for c in scales]
    cands += [("constant " + ",".join(f"{x:.4g}" for x in pi), ConstantStrategy(cfg, pi)) for pi in constants]
    for label, strat in cands:
        x = utility_samples(cfg, sim, strat, lam0, z0, which=("tildeP",), **kw)["tildeP"]
        e, d = Estimate.of(x), Estimate.of(base - x)
        rows.append(AuditRow(label, e.mean, e.stderr, d.mean, d.stderr))
    return AuditReport(Estimate.of(base), rows)
