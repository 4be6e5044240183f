"""Recursive HJB system over the lattice of distress states (K = 2 spatial solver).

Each state z gives a semilinear parabolic PDE in the filter coordinate lambda,

    w_t + a w'' + A(w') + theta w' + sum_i h_i exp(w_child_i(t, J_i) - w) + rho = 0,

with w(T) = 0, where A(g) = (1/2) sigma sigma^T g^2 + gamma/(2(1-gamma)) sigma_z sigma_z^T g^2.
Children (one more distressed stock) are solved first.  Time stepping is
backward Euler with every term implicit; each step is a Newton iteration on
a banded system.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from . import kernels
from .model import (
    DistressState,
    MarketConfig,
    all_states,
    as_state,
    compensator_drift,
    flip,
    jump_revision,
    sigma_matrix,
    theta_rho,
    tilde_intensity,
    transposition_symmetric,
)


class NumericalError(RuntimeError):
    """Solver failure; carries the distress state, time level and node."""

    def __init__(self, msg, state=None, level=None, node=None):
        super().__init__(msg)
        self.state = state
        self.level = level
        self.node = node


@dataclass(frozen=True)
class Grid:
    n_space: int = 201
    n_time: int = 3000

    def __post_init__(self):
        if self.n_space < 3:
            raise ValueError("n_space must be >= 3")
        if self.n_time < 2:
            raise ValueError("n_time must be >= 2")

    @property
    def lam(self) -> NDArray[np.float64]:
        return np.linspace(0.0, 1.0, self.n_space)

    @property
    def dlam(self) -> float:
        return 1.0 / (self.n_space - 1)

    def times(self, horizon: float) -> NDArray[np.float64]:
        return np.linspace(0.0, horizon, self.n_time)

    def dt(self, horizon: float) -> float:
        return horizon / (self.n_time - 1)


@dataclass(frozen=True)
class SolveOptions:
    """mode: 'direct' or 'stampacchia' (needs m >= 1).

    compensated=True includes the between-jump filter drift coming from the
    compensated distress martingales in the first-order coefficient; False
    uses theta exactly as in the literal generator.
    """

    mode: str = "direct"
    m: float | None = None
    boundary: str = "degenerate"
    newton_tol: float = 1e-10
    max_inner_iters: int = 50
    compensated: bool = True

    def __post_init__(self):
        if self.mode not in ("direct", "stampacchia"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "stampacchia" and (self.m is None or self.m < 1):
            raise ValueError("stampacchia mode needs m >= 1")
        if self.boundary not in ("degenerate", "dirichlet_zero"):
            raise ValueError(f"unknown boundary {self.boundary!r}")


@dataclass(frozen=True)
class Bounds:
    L_xi: float
    L0: float
    L_T: float
    U_xi: float
    U0: float
    U_T: float
    B: float
    C: float


@dataclass
class ValueSurface:
    """w[j, m] on t_j in [0, T] and lambda_m in [0, 1]."""

    z: DistressState
    t: NDArray[np.float64]
    lam: NDArray[np.float64]
    w: NDArray[np.float64]
    options: SolveOptions | None = None
    bounds: Bounds | None = None
    analytic: bool = False
    newton_iters: int = 0

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def dlam(self) -> float:
        return float(self.lam[1] - self.lam[0])

    @cached_property
    def grad(self) -> NDArray[np.float64]:
        """Nodal dw/dlambda: centered inside, second-order one-sided at the ends."""
        return np.gradient(self.w, self.dlam, axis=1, edge_order=2)

    def _locate(self, t, lam):
        t = np.asarray(t, dtype=float)
        lam = np.asarray(lam, dtype=float)
        nt, nl = self.w.shape
        ti = np.clip(t / self.dt, 0.0, nt - 1)
        li = np.clip(lam / self.dlam, 0.0, nl - 1)
        j0 = np.minimum(ti.astype(np.int64), nt - 2)
        m0 = np.minimum(li.astype(np.int64), nl - 2)
        return j0, ti - j0, m0, li - m0

    def _bilinear(self, table, t, lam):
        j0, wt, m0, wl = self._locate(t, lam)
        v0 = (1 - wl) * table[j0, m0] + wl * table[j0, m0 + 1]
        v1 = (1 - wl) * table[j0 + 1, m0] + wl * table[j0 + 1, m0 + 1]
        out = (1 - wt) * v0 + wt * v1
        return float(out) if np.ndim(out) == 0 else out

    def value(self, t, lam):
        """Bilinear interpolation of w."""
        return self._bilinear(self.w, t, lam)

    def gradient(self, t, lam):
        """Bilinear interpolation of the nodal gradient table."""
        return self._bilinear(self.grad, t, lam)

    def row_interp(self, j: int, lam) -> NDArray[np.float64]:
        return np.interp(lam, self.lam, self.w[j])


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class PDECoefficients:
    """Nodal coefficients of one state's PDE.

    qa = sigma sigma^T, qz = sigma_z sigma_z^T, kz = gamma / (2 (1 - gamma)).
    The diffusion coefficient is a = qa / 2.
    """

    qa: NDArray[np.float64]
    qz: NDArray[np.float64]
    kz: float
    theta: NDArray[np.float64]
    rho: NDArray[np.float64]


def pde_coefficients(cfg: MarketConfig, z, lam, opts: SolveOptions | None = None) -> PDECoefficients:
    if cfg.n_regimes != 2:
        raise NotImplementedError("the spatial solver handles K = 2 only")
    opts = opts or SolveOptions()
    z = as_state(z, cfg.n_stocks)
    lam = np.asarray(lam, dtype=float)
    sig = sigma_matrix(cfg, 0.0, lam, z)[..., 0, :]
    qa = (sig**2).sum(axis=-1)
    qz = ((sig * z.mask) ** 2).sum(axis=-1)
    theta, rho = theta_rho(cfg, 0.0, lam, z)
    theta = theta[..., 0]
    if opts.compensated:
        theta = theta + compensator_drift(cfg, 0.0, lam, z)[..., 0]
    kz = cfg.gamma / (2.0 * (1.0 - cfg.gamma))
    return PDECoefficients(np.ascontiguousarray(qa), np.ascontiguousarray(qz), kz,
                           np.ascontiguousarray(theta), np.ascontiguousarray(rho))


def _child(children: Mapping[DistressState, ValueSurface], z: DistressState, i: int) -> ValueSurface:
    cz = flip(z, i)
    if cz not in children:
        raise KeyError(f"missing child surface {cz.label} for state {z.label}")
    return children[cz]


def xi_coupling(cfg: MarketConfig, z, t, lam, v, children: Mapping[DistressState, ValueSurface]):
    """sum_i h_tilde_i exp(w_child(t, J_i(lam)) - v) + rho at one point."""
    z = as_state(z, cfg.n_stocks)
    ht = tilde_intensity(cfg, t, lam, z)
    _, rho = theta_rho(cfg, t, lam, z)
    out = rho
    for i in z.live:
        ch = _child(children, z, i)
        lam_i = jump_revision(cfg, t, lam, i, z)
        out = out + ht[..., i] * np.exp(ch.value(t, lam_i) - v)
    return out


def coupling_table(cfg: MarketConfig, z, grid: Grid, children) -> NDArray[np.float64]:
    """C[j, m] = sum_i h_tilde_i(lam_m) exp(w_child_i(t_j, J_i(lam_m)))."""
    z = as_state(z, cfg.n_stocks)
    lam = grid.lam
    out = np.zeros((grid.n_time, grid.n_space))
    ht = tilde_intensity(cfg, 0.0, lam, z)
    for i in z.live:
        ch = _child(children, z, i)
        if ch.w.shape != out.shape:
            raise ValueError("child surface grid does not match")
        x = np.clip(jump_revision(cfg, 0.0, lam, i, z), 0.0, 1.0)
        idx = np.minimum((x / ch.dlam).astype(np.int64), grid.n_space - 2)
        wgt = x / ch.dlam - idx
        vals = (1.0 - wgt) * ch.w[:, idx] + wgt * ch.w[:, idx + 1]
        out += ht[:, i] * np.exp(vals)
    return out


def bounds(cfg: MarketConfig, z, children, grid: Grid | None = None) -> Bounds:
    """Explicit lower/upper envelopes of the solution for state z.

    Extrema of rho and of the summed intensity are taken over the grid and a
    2x refinement of it.
    """
    z = as_state(z, cfg.n_stocks)
    grid = grid or Grid()
    lam = np.linspace(0.0, 1.0, 2 * grid.n_space - 1)
    _, rho = theta_rho(cfg, 0.0, lam, z)
    ht = tilde_intensity(cfg, 0.0, lam, z)
    live = z.live
    C = float(ht[:, live].sum(axis=1).max()) if live else 0.0
    B = max((float(np.abs(_child(children, z, i).w).max()) for i in live), default=0.0)
    T = cfg.horizon
    L_xi = float(rho.min())
    L0 = min(0.0, L_xi)
    L_T = (T + 1.0) * L0
    U_xi = C * np.exp(B - L_T) + float(rho.max())
    U0 = max(0.0, U_xi)
    U_T = (T + 1.0) * U0
    return Bounds(L_xi, L0, L_T, float(U_xi), U0, U_T, B, C)


# ---------------------------------------------------------------------------
# stepping


def truncation(q, m: float):
    """Stampacchia cap q / (1 + q / m) of the quadratic gradient term."""
    q = np.asarray(q, dtype=float)
    return q / (1.0 + q / m)


def semilinear_step(w_next, coeffs: PDECoefficients, coupling_row, dt: float, dlam: float,
                    opts: SolveOptions | None = None, lo: float = -np.inf, hi: float = np.inf,
                    backend: str | None = None):
    """One backward step from level j+1 to level j.  Returns (w_j, newton iterations)."""
    opts = opts or SolveOptions()
    m = float(opts.m) if opts.mode == "stampacchia" else 0.0
    if opts.mode != "stampacchia":
        lo, hi = -np.inf, np.inf
    step = kernels.get("hjb_step", backend)
    u, st, bad, it = step(np.ascontiguousarray(w_next, dtype=float), coeffs.qa, coeffs.qz, coeffs.kz,
                          coeffs.theta, coeffs.rho, np.ascontiguousarray(coupling_row, dtype=float),
                          float(dt), float(dlam), m, float(lo), float(hi),
                          int(opts.boundary == "dirichlet_zero"), float(opts.newton_tol),
                          int(opts.max_inner_iters))
    if st == 1:
        raise NumericalError(f"non-finite value at node {bad}", node=bad)
    if st == 2:
        raise NumericalError("Newton iteration did not converge")
    return np.asarray(u), it


def step_semilinear(cfg: MarketConfig, z, w_next, opts: SolveOptions | None = None,
                    grid: Grid | None = None, children=None, level: int | None = None,
                    backend: str | None = None) -> NDArray[np.float64]:
    """Advance one state's solution from level j+1 to level j (j = level)."""
    opts = opts or SolveOptions()
    grid = grid or Grid()
    z = as_state(z, cfg.n_stocks)
    coeffs = pde_coefficients(cfg, z, grid.lam, opts)
    dt = grid.dt(cfg.horizon)
    j = grid.n_time - 2 if level is None else level
    if z.live:
        row = coupling_table(cfg, z, grid, children or {})[j]
    else:
        row = np.zeros(grid.n_space)
    lo = hi = None
    if opts.mode == "stampacchia":
        b = bounds(cfg, z, children or {}, grid)
        tau = cfg.horizon - j * dt
        lo, hi = (tau + 1.0) * b.L0, (tau + 1.0) * b.U0
    else:
        lo, hi = -np.inf, np.inf
    try:
        return semilinear_step(w_next, coeffs, row, dt, grid.dlam, opts, lo, hi, backend)[0]
    except NumericalError as e:
        raise NumericalError(f"state {z.label}, level {j}: {e}", z, j, e.node) from None


def solve_terminal_state(cfg: MarketConfig, grid: Grid | None = None, z=None) -> ValueSurface:
    """Closed form gamma r (T - t) for a state without live stocks."""
    grid = grid or Grid()
    z = DistressState.ones(cfg.n_stocks) if z is None else as_state(z, cfg.n_stocks)
    if z.live:
        raise ValueError("closed form only applies when every stock is distressed")
    t = grid.times(cfg.horizon)
    w = np.repeat((cfg.gamma * cfg.rate * (cfg.horizon - t))[:, None], grid.n_space, axis=1)
    w[-1] = 0.0
    return ValueSurface(z, t, grid.lam, w, analytic=True)


def solve_state(cfg: MarketConfig, z, grid: Grid, opts: SolveOptions, children,
                backend: str | None = None) -> ValueSurface:
    z = as_state(z, cfg.n_stocks)
    coeffs = pde_coefficients(cfg, z, grid.lam, opts)
    cpl = coupling_table(cfg, z, grid, children) if z.live else np.zeros((grid.n_time, grid.n_space))
    b = bounds(cfg, z, children, grid)
    if opts.mode == "stampacchia":
        m, lo0, hi0 = float(opts.m), b.L0, b.U0
    else:
        m, lo0, hi0 = 0.0, -np.inf, np.inf
    run = kernels.get("hjb_backward", backend)
    W, st, lev, node, iters = run(coeffs.qa, coeffs.qz, coeffs.kz, coeffs.theta, coeffs.rho,
                                  np.ascontiguousarray(cpl), grid.dt(cfg.horizon), grid.dlam,
                                  m, lo0, hi0, int(opts.boundary == "dirichlet_zero"),
                                  float(opts.newton_tol), int(opts.max_inner_iters))
    if st != 0:
        what = "non-finite value" if st == 1 else "Newton iteration did not converge"
        raise NumericalError(f"state {z.label}, level {lev}, node {node}: {what}", z, lev, node)
    return ValueSurface(z, grid.times(cfg.horizon), grid.lam, np.asarray(W), opts, b,
                        analytic=False, newton_iters=int(iters))


# ---------------------------------------------------------------------------
# recursion and symmetry reduction


def _canonical(z: DistressState, groups: Sequence[int]) -> tuple[tuple[int, ...], DistressState]:
    labels = sorted(set(groups))
    counts = tuple(sum(z.bits[i] for i in range(z.n) if groups[i] == g) for g in labels)
    bits = [0] * z.n
    for g, c in zip(labels, counts):
        members = [i for i in range(z.n) if groups[i] == g]
        for i in members[:c]:
            bits[i] = 1
    return counts, DistressState(tuple(bits))


def reduce_states(cfg: MarketConfig, groups: Sequence[int]):
    """Map every distress state to a canonical representative.

    Stocks sharing a group id must be exchangeable (tables invariant under
    swapping them).  Returns (state -> representative, number of PDE solves).
    """
    groups = list(groups)
    if len(groups) != cfg.n_stocks:
        raise ValueError("group assignment must list one group per stock")
    for i in range(cfg.n_stocks):
        for j in range(i + 1, cfg.n_stocks):
            if groups[i] == groups[j] and not transposition_symmetric(cfg, i, j):
                raise ValueError(f"stocks {i} and {j} share a group but are not homogeneous")
    canon = {}
    keys = set()
    for z in all_states(cfg.n_stocks):
        key, rep = _canonical(z, groups)
        canon[z] = rep
        keys.add(key)
    return canon, len(keys)


def recursive_solve(cfg: MarketConfig, grid: Grid | None = None, opts: SolveOptions | None = None,
                    groups: Sequence[int] | None = None, numeric_terminal: bool = False,
                    backend: str | None = None) -> dict[DistressState, ValueSurface]:
    """Solve every distress state, children before parents.

    With ``groups`` only canonical representatives are solved and the other
    states reuse their representative's surface.
    """
    grid = grid or Grid()
    opts = opts or SolveOptions()
    if groups is None:
        canon = {z: z for z in all_states(cfg.n_stocks)}
    else:
        canon, _ = reduce_states(cfg, groups)
    solved: dict[DistressState, ValueSurface] = {}
    for z in all_states(cfg.n_stocks):
        rep = canon[z]
        if rep in solved:
            continue
        if not rep.live and not numeric_terminal:
            solved[rep] = solve_terminal_state(cfg, grid, rep)
            continue
        children = {flip(rep, i): solved[canon[flip(rep, i)]] for i in rep.live}
        solved[rep] = solve_state(cfg, rep, grid, opts, children, backend)
    return {z: (solved[canon[z]] if canon[z] == z else replace(solved[canon[z]], z=z))
            for z in all_states(cfg.n_stocks)}


def grid_l2(a: NDArray, b: NDArray, dt: float, dlam: float) -> float:
    return float(np.sqrt(np.sum((a - b) ** 2) * dt * dlam))


def stampacchia_convergence(cfg: MarketConfig, grid: Grid | None = None,
                            m_sequence: Sequence[float] = (10, 100, 1000, 10000),
                            opts: SolveOptions | None = None) -> list[float]:
    """Grid-L2 distance between m-truncated and direct solves (max over states)."""
    grid = grid or Grid()
    base = opts or SolveOptions()
    direct = recursive_solve(cfg, grid, replace(base, mode="direct", m=None))
    dt = grid.dt(cfg.horizon)
    out = []
    for m in m_sequence:
        trunc = recursive_solve(cfg, grid, replace(base, mode="stampacchia", m=float(m)))
        out.append(max(grid_l2(trunc[z].w, direct[z].w, dt, grid.dlam) for z in direct))
    return out


def nonincreasing(seq: Sequence[float], slack: float = 0.05) -> bool:
    """True when each entry is at most (1 + slack) times its predecessor."""
    return all(b <= a * (1.0 + slack) for a, b in zip(seq, seq[1:]))
