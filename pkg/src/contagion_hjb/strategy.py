"""Optimal feedback portfolio from solved value surfaces."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.typing import NDArray

from .hjb_solver import ValueSurface
from .model import (
    DistressState,
    MarketConfig,
    all_states,
    as_state,
    beta_varpi,
    gamma_vec,
    masked_sigma,
    sigma_matrix,
)


def _grad_vec(gradw, K: int):
    g = np.asarray(gradw, dtype=float)
    if K == 2 and (g.ndim == 0 or g.shape[-1] != 1):
        g = g[..., None]
    return g


def feedback_from_gradient(cfg: MarketConfig, gradw, t, lam, z) -> NDArray[np.float64]:
    """pi = [(Sigma^T Sigma)^-1 (Sigma sigma^T grad w^T - Gamma)]_z / (1 - gamma)."""
    z = as_state(z, cfg.n_stocks)
    g = _grad_vec(gradw, cfg.n_regimes)
    sig = sigma_matrix(cfg, t, lam, z)  # (..., K-1, N)
    vol = cfg.volatility[:, z.index]
    gam = gamma_vec(cfg, t, lam, z)
    hedge = (sig * g[..., :, None]).sum(axis=-2) * vol
    return (hedge - gam) / vol**2 / (1.0 - cfg.gamma) * z.mask


def phi_and_phistar(cfg: MarketConfig, gradw, t, lam, z, pi):
    """Hamiltonian Phi at pi and its maximum Phi* over pi."""
    z = as_state(z, cfg.n_stocks)
    g = _grad_vec(gradw, cfg.n_regimes)
    gm = cfg.gamma
    vol = cfg.volatility[:, z.index]
    sig = sigma_matrix(cfg, t, lam, z)
    sig_z = masked_sigma(cfg, t, lam, z)
    gam = gamma_vec(cfg, t, lam, z)
    beta = beta_varpi(cfg, t, lam)
    pz = np.asarray(pi, dtype=float) * z.mask
    drift = beta + gm * (sig * (vol * pz)[..., None, :]).sum(axis=-1)
    phi = ((g * drift).sum(axis=-1) - gm * (pz * gam).sum(axis=-1)
           - 0.5 * gm * (1 - gm) * (pz**2 * vol**2).sum(axis=-1))
    gz = gam * z.mask
    sg = (sig_z * g[..., :, None]).sum(axis=-2)  # grad w sigma_z, length N
    k = gm / (1.0 - gm)
    phistar = ((g * (beta - k * (sig_z * (gz / vol)[..., None, :]).sum(axis=-1))).sum(axis=-1)
               + 0.5 * k * (sg**2).sum(axis=-1) + 0.5 * k * ((gz / vol) ** 2).sum(axis=-1))
    return phi, phistar


class FeedbackStrategy:
    """pi*(t, lambda, z) using the nodal gradient tables of the surfaces.

    The gradient at an off-grid point is the bilinear interpolant of nodal
    centered differences.  ``scale`` multiplies the whole vector (audits).
    """

    kind = 0

    def __init__(self, cfg: MarketConfig, surfaces: Mapping[DistressState, ValueSurface], scale: float = 1.0):
        if cfg.n_regimes != 2:
            raise NotImplementedError("feedback tables need K = 2")
        self.cfg = cfg
        self.surfaces = dict(surfaces)
        self.scale = float(scale)
        ref = next(iter(self.surfaces.values()))
        nt, nl = ref.w.shape
        self.gdt, self.gdl = ref.dt, ref.dlam
        self.grad = np.zeros((cfg.n_states, nt, nl))
        for z, s in self.surfaces.items():
            if s.w.shape != (nt, nl):
                raise ValueError("surfaces must share one grid")
            self.grad[z.index] = s.grad

    def scaled(self, c: float) -> "FeedbackStrategy":
        out = object.__new__(FeedbackStrategy)
        out.__dict__.update(self.__dict__)
        out.scale = self.scale * float(c)
        return out

    def _surface(self, z: DistressState) -> ValueSurface:
        if z not in self.surfaces:
            raise KeyError(f"no surface for state {z.label}")
        return self.surfaces[z]

    def gradient(self, t, lam, z):
        return self._surface(as_state(z, self.cfg.n_stocks)).gradient(t, lam)

    def __call__(self, t, lam, z) -> NDArray[np.float64]:
        z = as_state(z, self.cfg.n_stocks)
        g = self._surface(z).gradient(t, lam)
        return self.scale * feedback_from_gradient(self.cfg, g, t, lam, z)

    def batch(self, t: float, P: NDArray, zidx: NDArray) -> NDArray[np.float64]:
        from ._fallback import table_strategy
        from .filter import kernel_tables

        mu, _, bh, vol, _ = kernel_tables(self.cfg)
        fn = table_strategy(0, self.scale, None, self.grad, self.gdt, self.gdl, mu, bh, vol,
                            self.cfg.rate, self.cfg.gamma)
        return fn(t, P, zidx)

    def kernel_args(self):
        return 0, self.scale, np.zeros(self.cfg.n_stocks), self.grad, self.gdt, self.gdl


class ConstantStrategy:
    """Fixed fractions, zeroed for distressed stocks."""

    kind = 1

    def __init__(self, cfg: MarketConfig, pi):
        self.cfg = cfg
        self.pi = np.array(pi, dtype=float).reshape(cfg.n_stocks)

    def __call__(self, t, lam, z):
        return self.pi * as_state(z, self.cfg.n_stocks).mask

    def batch(self, t, P, zidx):
        live = ((np.asarray(zidx)[:, None] >> np.arange(self.cfg.n_stocks)) & 1) == 0
        return np.where(live, self.pi[None, :], 0.0)

    def kernel_args(self):
        return 1, 1.0, self.pi.copy(), np.zeros((1, 2, 2)), 1.0, 1.0


def feedback(cfg: MarketConfig, surfaces, t, lam, z) -> NDArray[np.float64]:
    z = as_state(z, cfg.n_stocks)
    if z not in surfaces:
        raise KeyError(f"no surface for state {z.label}")
    g = surfaces[z].gradient(t, lam)
    return feedback_from_gradient(cfg, g, t, lam, z)


def value_terminal_utility(cfg: MarketConfig, surfaces, lam, z) -> float:
    """(v^gamma / gamma) exp(w(0, lambda, z))."""
    z = as_state(z, cfg.n_stocks)
    if z not in surfaces:
        raise KeyError(f"no surface for state {z.label}")
    v, g = cfg.initial_wealth, cfg.gamma
    return v**g / g * np.exp(surfaces[z].value(0.0, lam))


def strategy_table(cfg: MarketConfig, surfaces, t: float = 0.0, lam=None):
    """Rows (lambda, state label, pi_1..pi_N) at time t for every state."""
    if lam is None:
        lam = next(iter(surfaces.values())).lam
    rows = []
    for z in all_states(cfg.n_stocks):
        pis = feedback(cfg, surfaces, t, np.asarray(lam), z)
        for l, p in zip(lam, pis):
            rows.append((float(l), z.label, *map(float, p)))
    return rows


def write_strategy_csv(path, cfg: MarketConfig, surfaces, t: float = 0.0, lam=None) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "lambda", "state", *[f"pi_{i + 1}" for i in range(cfg.n_stocks)]])
        for l, lab, *pis in strategy_table(cfg, surfaces, t, lam):
            w.writerow([repr(float(t)), repr(l), lab, *[repr(p) for p in pis]])
