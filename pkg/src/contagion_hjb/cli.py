"""Command line driver: solve, sweep, verify, filter-demo.

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import re
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import hjb_solver as hs
from .filter import FilterError, SimConfig, hmm_oracle_filter, run_filter, simulate_truth
from .model import ConfigError, DistressState, MarketConfig, all_states, generator_from_rates
from .strategy import feedback, strategy_table

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# configuration


@dataclass
class VerifyBlock:
    lambdas: list = field(default_factory=lambda: [0.2, 0.5, 0.8])
    z0: str = ""
    calibration_paths: int = 20000
    calibration_lambda: float = 0.5
    audit_lambda: float = 0.5
    audit_scales: list = field(default_factory=lambda: [0.0, 0.5, 0.8, 1.2, 2.0])


@dataclass
class SweepBlock:
    parameter: str = ""
    values: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    market: MarketConfig
    grid: hs.Grid = field(default_factory=hs.Grid)
    solve: hs.SolveOptions = field(default_factory=hs.SolveOptions)
    sim: SimConfig = field(default_factory=SimConfig)
    verify: VerifyBlock = field(default_factory=VerifyBlock)
    sweep: SweepBlock | None = None
    output: str = "out"


def _compact(a: np.ndarray):
    """Drop the distress-state axis when the table does not depend on it."""
    if np.all(a == a[..., :1]):
        return a[..., 0].tolist()
    return a.tolist()


def market_to_dict(cfg: MarketConfig) -> dict:
    return {
        "n_stocks": cfg.n_stocks,
        "n_regimes": cfg.n_regimes,
        "rate": cfg.rate,
        "gamma": cfg.gamma,
        "horizon": cfg.horizon,
        "generator": cfg.generator.tolist(),
        "drift": _compact(cfg.drift),
        "intensity": _compact(cfg.intensity),
        "volatility": _compact(cfg.volatility),
        "initial_filter": cfg.initial_filter.tolist(),
        "initial_wealth": cfg.initial_wealth,
    }


_MARKET_REQUIRED = ("n_stocks", "n_regimes", "rate", "gamma", "horizon", "drift", "intensity",
                    "volatility", "initial_filter")


def market_from_dict(d: dict) -> MarketConfig:
    if not isinstance(d, dict):
        raise ConfigError("market: expected an object")
    for key in _MARKET_REQUIRED:
        if key not in d:
            raise ConfigError(f"market.{key}: missing")
    if "generator" in d:
        gen = d["generator"]
    elif "transition_rates" in d:
        gen = generator_from_rates(d["transition_rates"])
    else:
        raise ConfigError("market.generator: missing (or give market.transition_rates)")
    known = set(_MARKET_REQUIRED) | {"generator", "transition_rates", "initial_wealth"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"market: unknown field(s) {sorted(extra)}")
    try:
        return MarketConfig(
            n_stocks=d["n_stocks"], n_regimes=d["n_regimes"], rate=d["rate"], gamma=d["gamma"],
            horizon=d["horizon"], generator=gen, drift=d["drift"], intensity=d["intensity"],
            volatility=d["volatility"], initial_filter=d["initial_filter"],
            initial_wealth=d.get("initial_wealth", 1.0))
    except ConfigError as e:
        raise ConfigError(f"market: {e}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"market: {e}") from None


def _block(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{name}: expected an object")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"{name}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{name}: {e}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict) or "market" not in d:
        raise ConfigError("market: missing")
    extra = set(d) - {"market", "grid", "solve", "sim", "verify", "sweep", "output"}
    if extra:
        raise ConfigError(f"unknown top-level field(s) {sorted(extra)}")
    cfg = ExperimentConfig(
        market=market_from_dict(d["market"]),
        grid=_block(hs.Grid, d.get("grid"), "grid"),
        solve=_block(hs.SolveOptions, d.get("solve"), "solve"),
        sim=_block(SimConfig, d.get("sim"), "sim"),
        verify=_block(VerifyBlock, d.get("verify"), "verify"),
        sweep=_block(SweepBlock, d["sweep"], "sweep") if d.get("sweep") is not None else None,
        output=str(d.get("output", "out")),
    )
    if cfg.sweep is not None:
        if not cfg.sweep.values:
            raise ConfigError("sweep.values: empty value list")
        get_parameter(cfg.market, cfg.sweep.parameter)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "market": market_to_dict(cfg.market),
        "grid": asdict(cfg.grid),
        "solve": asdict(cfg.solve),
        "sim": asdict(cfg.sim),
        "verify": asdict(cfg.verify),
        "sweep": asdict(cfg.sweep) if cfg.sweep is not None else None,
        "output": cfg.output,
    }


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def loads(text: str) -> ExperimentConfig:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"line {e.lineno}, column {e.colno}: {e.msg}") from None
    return config_from_dict(d)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    return loads(text)


def default_config_text() -> str:
    return resources.files("contagion_hjb").joinpath("data/benchmark.json").read_text()


# ---------------------------------------------------------------------------
# sweep parameter paths (1-based stock and regime indices, as in the CSV headers)

_PATH = re.compile(r"^(gamma|rate|horizon)$|^(drift|intensity)\[(\d+)\]\[(\d+)\]$|^volatility\[(\d+)\]$")


def _parse_path(cfg: MarketConfig, path: str):
    m = _PATH.match(path.replace(" ", ""))
    if not m:
        raise ConfigError(f"unknown parameter path {path!r}")
    if m.group(1):
        return (m.group(1),)
    if m.group(2):
        i, k = int(m.group(3)) - 1, int(m.group(4)) - 1
        if not (0 <= i < cfg.n_stocks and 0 <= k < cfg.n_regimes):
            raise ConfigError(f"parameter path {path!r} out of range")
        return (m.group(2), i, k)
    i = int(m.group(5)) - 1
    if not 0 <= i < cfg.n_stocks:
        raise ConfigError(f"parameter path {path!r} out of range")
    return ("volatility", i)


def get_parameter(cfg: MarketConfig, path: str):
    p = _parse_path(cfg, path)
    if len(p) == 1:
        return getattr(cfg, p[0])
    return getattr(cfg, p[0])[p[1:]].copy()


def set_parameter(cfg: MarketConfig, path: str, value: float) -> MarketConfig:
    """Return a copy with the parameter set (for every distress state)."""
    p = _parse_path(cfg, path)
    if len(p) == 1:
        return cfg.replace(**{p[0]: float(value)})
    table = np.array(getattr(cfg, p[0]))
    table[p[1:]] = float(value)
    return cfg.replace(**{p[0]: table})


# ---------------------------------------------------------------------------
# output helpers


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def surface_csv(s: hs.ValueSurface) -> str:
    """Columns t, lambda, w; row-major by time then lambda."""
    buf = io.StringIO()
    buf.write("t,lambda,w\n")
    lam = [repr(float(x)) for x in s.lam]
    for j, t in enumerate(s.t):
        ts = repr(float(t))
        row = s.w[j]
        buf.write("".join(f"{ts},{lam[m]},{float(row[m])!r}\n" for m in range(len(lam))))
    return buf.getvalue()


def bounds_rows(cfg: MarketConfig, surfaces):
    rows = []
    for z in all_states(cfg.n_stocks):
        s = surfaces[z]
        if s.bounds is None:
            b = hs.bounds(cfg, z, surfaces, hs.Grid(len(s.lam), len(s.t)))
        else:
            b = s.bounds
        lo, hi = float(s.w.min()), float(s.w.max())
        rows.append([z.label, _num(b.L_xi), _num(b.L_T), _num(b.U_xi), _num(b.U_T), _num(b.B), _num(b.C),
                     _num(lo), _num(hi), _num(b.L_T <= lo and hi <= b.U_T), _num(s.analytic),
                     _num(s.newton_iters)])
    return rows


BOUNDS_HEADER = ["state", "L_xi", "L_T", "U_xi", "U_T", "B", "C", "w_min", "w_max", "contained",
                 "analytic", "max_newton_iters"]


def _strategy_csv(cfg, surfaces) -> str:
    rows = [[_num(0.0), _num(l), lab, *[_num(p) for p in pis]] for l, lab, *pis in strategy_table(cfg, surfaces)]
    return _csv_text(["t", "lambda", "state", *[f"pi_{i + 1}" for i in range(cfg.n_stocks)]], rows)


# ---------------------------------------------------------------------------
# commands


def cmd_solve(exp: ExperimentConfig, out: Path) -> int:
    surfaces = hs.recursive_solve(exp.market, exp.grid, exp.solve)
    for z in all_states(exp.market.n_stocks):
        _atomic_write(out / f"surface_{z.label}.csv", surface_csv(surfaces[z]))
    _atomic_write(out / "bounds.csv", _csv_text(BOUNDS_HEADER, bounds_rows(exp.market, surfaces)))
    _atomic_write(out / "strategy_t0.csv", _strategy_csv(exp.market, surfaces))
    print(f"solved {len(surfaces)} states; output in {out}")
    return EXIT_OK


def _slug(path: str) -> str:
    return re.sub(r"[\[\]]+", "_", path).strip("_")


def sweep_properties(exp: ExperimentConfig, tables: dict) -> list[tuple[str, bool, str]]:
    """Qualitative checks on the t = 0 strategy curves of a sweep."""
    cfg = exp.market
    out = []
    values = sorted(tables)
    lam = next(iter(tables.values()))["lam"]
    zero = DistressState.zeros(cfg.n_stocks).label
    for v in values:
        t = tables[v]
        for z in all_states(cfg.n_stocks):
            if z.popcount != 1 or cfg.n_stocks < 2:
                continue
            # other live stocks should not be held more after a distress
            for i in z.live:
                ok = bool(np.all(t[z.label][:, i] <= t[zero][:, i] + 1e-12))
                out.append((f"value {v:g}: pi_{i + 1} in state {z.label} <= state {zero}", ok,
                            f"max excess {np.max(t[z.label][:, i] - t[zero][:, i]):.3g}"))
    par = exp.sweep.parameter.replace(" ", "")
    seq = np.array([tables[v][zero] for v in values])  # (V, L, N)
    diffs = np.diff(seq, axis=0)
    if par.startswith("intensity[") and par.endswith("[1]"):
        i = int(re.findall(r"\d+", par)[0]) - 1
        m = int(np.argmin(np.abs(lam - 0.9)))
        for j in range(cfg.n_stocks):
            d = diffs[:, m, j]
            want = "decreasing" if j == i else "increasing"
            ok = bool(np.all(d < 0)) if j == i else bool(np.all(d > 0))
            out.append((f"pi_{j + 1} at lambda 0.9 in state {zero} strictly {want} in {par}", ok,
                        "steps " + " ".join(f"{x:+.4g}" for x in d)))
    elif par == "gamma":
        for j in range(cfg.n_stocks):
            ok = bool(np.all(diffs[:, :, j] >= -1e-12))
            out.append((f"pi_{j + 1} in state {zero} increasing in gamma at every lambda", ok,
                        f"min step {diffs[:, :, j].min():+.4g}"))
    elif par.startswith("volatility["):
        i = int(re.findall(r"\d+", par)[0]) - 1
        ok = bool(np.all(diffs[:, :, i] <= 1e-12))
        out.append((f"pi_{i + 1} in state {zero} decreasing in {par} at every lambda", ok,
                    f"max step {diffs[:, :, i].max():+.4g}"))
    return out


def cmd_sweep(exp: ExperimentConfig, out: Path, threads: int = 1) -> int:
    if exp.sweep is None or not exp.sweep.parameter:
        raise ConfigError("sweep: block missing")
    if not exp.sweep.values:
        raise ConfigError("sweep.values: empty value list")
    cfg0 = exp.market
    slug = _slug(exp.sweep.parameter)
    tables = {}
    for v in exp.sweep.values:
        cfg = set_parameter(cfg0, exp.sweep.parameter, v)
        surfaces = hs.recursive_solve(cfg, exp.grid, exp.solve)
        lam = surfaces[DistressState.zeros(cfg.n_stocks)].lam
        t = {"lam": lam}
        for z in all_states(cfg.n_stocks):
            t[z.label] = feedback(cfg, surfaces, 0.0, lam, z)
        tables[float(v)] = t
        labels = [z.label for z in all_states(cfg.n_stocks)]
        for i in range(cfg.n_stocks):
            rows = [[_num(lam[m]), *[_num(t[lab][m, i]) for lab in labels]] for m in range(len(lam))]
            _atomic_write(out / f"sweep_{slug}={float(v)!r}_pi_{i + 1}.csv",
                          _csv_text(["lambda", *[f"state_{lab}" for lab in labels]], rows))
    props = sweep_properties(exp, tables)
    _atomic_write(out / f"sweep_{slug}_properties.csv",
                  _csv_text(["check", "pass", "detail"], [[c, _num(ok), d] for c, ok, d in props]))
    for c, ok, d in props:
        print(f"{'PASS' if ok else 'FAIL'}  {c}  ({d})")
    return EXIT_OK


def cmd_verify(exp: ExperimentConfig, out: Path, threads: int = 1) -> int:
    from . import verify as vf
    from .strategy import FeedbackStrategy

    cfg = exp.market
    z0 = DistressState.from_label(exp.verify.z0) if exp.verify.z0 else DistressState.zeros(cfg.n_stocks)
    surfaces = hs.recursive_solve(cfg, exp.grid, exp.solve)
    strat = FeedbackStrategy(cfg, surfaces)
    cal_sim = SimConfig(exp.sim.dt, exp.sim.horizon, exp.sim.seed + 1, exp.verify.calibration_paths)
    allowance = vf.calibrate_allowance(cfg, cal_sim, strat, exp.verify.calibration_lambda, z0,
                                       threads=threads)
    reports = [vf.verification_report(cfg, exp.sim, surfaces, lam, z0, allowance, strat, threads=threads)
               for lam in exp.verify.lambdas]
    audit = vf.suboptimality_audit(cfg, exp.sim, surfaces, exp.verify.audit_lambda, z0,
                                   exp.verify.audit_scales, threads=threads)
    out.mkdir(parents=True, exist_ok=True)
    vf.write_reports_csv(out / "verification.csv", reports)
    text = "\n\n".join(r.to_text() for r in reports)
    cal = "\n".join(f"  C[{k}] = {v:.6g}  (shift {allowance.shifts[k][0]:.4g} +- {allowance.shifts[k][1]:.3g})"
                    for k, v in allowance.C.items())
    text += f"\n\ndiscretization allowance, dt vs 2dt on {allowance.n_paths} paths:\n{cal}"
    text += "\n\nsuboptimality audit (lambda = %g)\n%s\n" % (exp.verify.audit_lambda, audit.to_text())
    _atomic_write(out / "verification.txt", text)
    print(text)
    ok = all(r.passed for r in reports) and audit.passed
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_filter_demo(exp: ExperimentConfig, out: Path) -> int:
    cfg = exp.market
    sim = SimConfig(exp.sim.dt, exp.sim.horizon, exp.sim.seed, 1)
    path = simulate_truth(cfg, sim)[0]
    f = run_filter(cfg, path)
    o = hmm_oracle_filter(cfg, path)
    N = cfg.n_stocks
    Y = path.Y
    rows = [[_num(path.t[j]), _num(path.regimes[j] + 1), *[_num(Y[j, i]) for i in range(N)],
             *[_num(path.H[j, i]) for i in range(N)],
             *[_num(x) for x in f.p[j]], *[_num(x) for x in o.p[j]]] for j in range(len(path.t))]
    K = cfg.n_regimes
    header = ["t", "regime", *[f"Y_{i + 1}" for i in range(N)], *[f"H_{i + 1}" for i in range(N)],
              *[f"filter_p_{k + 1}" for k in range(K)], *[f"oracle_p_{k + 1}" for k in range(K)]]
    _atomic_write(out / "filter_demo.csv", _csv_text(header, rows))
    print(f"max |filter - oracle| = {np.abs(f.p - o.p).max():.3g}; output in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contagion-hjb", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=["solve", "sweep", "verify", "filter-demo", "show-config"])
    p.add_argument("--config", help="experiment JSON (default: the shipped benchmark)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="simulation seed (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo (0 = auto)")
    p.add_argument("--parameter", help="sweep parameter path, e.g. 'intensity[1][1]' or gamma")
    p.add_argument("--values", help="comma separated sweep values")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = Path(args.config).read_text() if args.config else default_config_text()
    except OSError as e:
        print(f"config error: cannot read {args.config}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        exp = loads(text)
        if args.seed is not None:
            exp.sim = SimConfig(exp.sim.dt, exp.sim.horizon, args.seed, exp.sim.n_paths)
        if args.parameter or args.values is not None:
            vals = [] if not args.values else [float(x) for x in args.values.split(",") if x.strip()]
            exp.sweep = SweepBlock(args.parameter or (exp.sweep.parameter if exp.sweep else ""), vals)
            get_parameter(exp.market, exp.sweep.parameter)
        out = Path(args.out or exp.output)
        threads = args.threads if args.threads > 0 else (os.cpu_count() or 1)
        if args.verb == "show-config":
            sys.stdout.write(dumps(exp))
            return EXIT_OK
        if args.verb == "solve":
            return cmd_solve(exp, out)
        if args.verb == "sweep":
            return cmd_sweep(exp, out, threads)
        if args.verb == "verify":
            return cmd_verify(exp, out, threads)
        return cmd_filter_demo(exp, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (hs.NumericalError, FilterError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
