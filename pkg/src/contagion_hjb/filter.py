"""Ground-truth market simulation and the regime filter.

Randomness is keyed by (seed, path index): each path owns a PCG64 stream
seeded from SeedSequence([seed, index]).  Each path
draws, in order: N unit exponentials (distress thresholds), an (n_steps, N)
block of standard normals, then the hidden chain.  Keeping the chain last
means estimators that do not need it see the same normals and thresholds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import kernels
from .model import DistressState, MarketConfig, as_state

EXIT_TOL = 0.05


class FilterError(RuntimeError):
    """The filter left the simplex by more than the tolerance."""

    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    horizon: float = 3.0
    seed: int = 0
    n_paths: int = 1000

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.dt <= self.horizon:
            raise ValueError("need 0 < dt <= horizon")
        if self.n_paths < 1:
            raise ValueError("n_paths must be positive")
        n = self.horizon / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError("horizon must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def check(self, cfg: MarketConfig) -> None:
        if self.horizon > cfg.horizon + 1e-12:
            raise ValueError("simulation horizon exceeds the model horizon")
        if float(np.max(cfg.intensity)) * self.dt >= 0.5:
            warnings.warn("max intensity * dt >= 0.5; distress clustering within a step is likely",
                          RuntimeWarning, stacklevel=2)


# ---------------------------------------------------------------------------
# randomness


def path_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed % 2**64, index])))


def chain_on_grid(rng: np.random.Generator, generator: NDArray, p0: NDArray,
                  n_steps: int, dt: float) -> NDArray[np.int64]:
    """Regime at t_0..t_n from exact exponential holding times."""
    K = len(p0)
    out = np.empty(n_steps + 1, dtype=np.int64)
    x = min(int(np.searchsorted(np.cumsum(p0), rng.random(), side="right")), K - 1)
    t_end = n_steps * dt
    t = 0.0
    start = 0
    while start <= n_steps:
        rate = -generator[x, x]
        if rate <= 0:
            out[start:] = x
            break
        t = t + rng.standard_exponential() / rate
        # grid points strictly before the jump keep the current regime
        stop = min(n_steps + 1, int(np.ceil(t / dt - 1e-12)))
        stop = max(stop, start)
        out[start:stop] = x
        start = stop
        if t > t_end:
            out[start:] = x
            break
        w = np.array(generator[x], dtype=float)
        w[x] = 0.0
        x = min(int(np.searchsorted(np.cumsum(w / rate), rng.random(), side="right")), K - 1)
    return out


@dataclass
class PathDraws:
    thetas: NDArray[np.float64]  # (B, N)
    normals: NDArray[np.float64]  # (B, n, N)
    regimes: NDArray[np.int64] | None  # (B, n + 1)


def draw_paths(cfg: MarketConfig, sim: SimConfig, start: int, stop: int, p0=None,
               chain: bool = True) -> PathDraws:
    n, N = sim.n_steps, cfg.n_stocks
    p0 = np.asarray(cfg.initial_filter if p0 is None else p0, dtype=float)
    B = stop - start
    thetas = np.empty((B, N))
    normals = np.empty((B, n, N))
    regimes = np.empty((B, n + 1), dtype=np.int64) if chain else None
    for b in range(B):
        rng = path_rng(sim.seed, start + b)
        thetas[b] = rng.standard_exponential(N)
        normals[b] = rng.standard_normal((n, N))
        if chain:
            regimes[b] = chain_on_grid(rng, cfg.generator, p0, n, sim.dt)
    return PathDraws(thetas, normals, regimes)


def coarsen_normals(normals: NDArray, factor: int) -> NDArray:
    """Sum groups of `factor` consecutive increments, rescaled to unit variance."""
    B, n, N = normals.shape
    if n % factor:
        raise ValueError("step count not divisible by the coarsening factor")
    return np.ascontiguousarray(normals.reshape(B, n // factor, factor, N).sum(axis=2) / np.sqrt(factor))


def kernel_tables(cfg: MarketConfig):
    """Contiguous (N, K, S) tables of mu, h and b + h, plus vol (N, S) and the generator."""
    mu = np.array(cfg.mu_table(), dtype=float, order="C")
    h = np.array(cfg.intensity, dtype=float, order="C")
    bh = np.array(cfg.drift + cfg.intensity, dtype=float, order="C")
    vol = np.array(cfg.volatility, dtype=float, order="C")
    gen = np.array(cfg.generator, dtype=float, order="C")
    return mu, h, bh, vol, gen


# ---------------------------------------------------------------------------
# paths


@dataclass
class MarketPath:
    t: NDArray[np.float64]
    regimes: NDArray[np.int64]
    dW: NDArray[np.float64]
    dY: NDArray[np.float64]
    H: NDArray[np.int64]
    tau: NDArray[np.float64]
    z0: DistressState
    index: int = 0

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def Y(self) -> NDArray[np.float64]:
        return np.vstack([np.zeros(self.dY.shape[1]), np.cumsum(self.dY, axis=0)])

    @property
    def dstep(self) -> NDArray[np.int64]:
        """Step j in which each stock entered distress (-1 if never)."""
        newly = np.diff(self.H, axis=0)
        out = np.full(self.H.shape[1], -1, dtype=np.int64)
        for i in range(self.H.shape[1]):
            hits = np.nonzero(newly[:, i])[0]
            if hits.size:
                out[i] = hits[0]
        return out

    def coarsen(self, factor: int) -> "MarketPath":
        """Same path observed on every `factor`-th grid point."""
        n = self.dY.shape[0]
        if n % factor:
            raise ValueError("step count not divisible by the coarsening factor")
        m = n // factor
        N = self.dY.shape[1]
        return MarketPath(self.t[::factor], self.regimes[::factor],
                          self.dW.reshape(m, factor, N).sum(axis=1),
                          self.dY.reshape(m, factor, N).sum(axis=1),
                          self.H[::factor], self.tau, self.z0, self.index)


@dataclass
class FilterPath:
    t: NDArray[np.float64]
    p: NDArray[np.float64]
    H: NDArray[np.int64]

    @property
    def lam(self) -> NDArray[np.float64]:
        return self.p[:, 0]


def _H_from_dstep(dstep, z0: DistressState, n: int) -> NDArray[np.int64]:
    H = np.tile(np.array(z0.bits, dtype=np.int64), (n + 1, 1))
    for i, j in enumerate(dstep):
        if j >= 0:
            H[j + 1:, i] = 1
    return H


def simulate_truth(cfg: MarketConfig, sim: SimConfig, z0=None, p0=None, start: int = 0,
                   backend: str | None = None) -> list[MarketPath]:
    """Hidden chain, log prices and distress times for paths start..start+n_paths-1.

    p0 is the law of the initial regime (defaults to the configured prior).
    """
    sim.check(cfg)
    z0 = DistressState.zeros(cfg.n_stocks) if z0 is None else as_state(z0, cfg.n_stocks)
    mu, h, _, vol, _ = kernel_tables(cfg)
    d = draw_paths(cfg, sim, start, start + sim.n_paths, p0)
    truth = kernels.get("truth_batch", backend)
    dY, dstep, tau = truth(d.normals, d.thetas, d.regimes, z0.index, sim.dt, mu, h, vol)
    t = np.arange(sim.n_steps + 1) * sim.dt
    out = []
    for b in range(sim.n_paths):
        H = _H_from_dstep(dstep[b], z0, sim.n_steps)
        dW = np.sqrt(sim.dt) * d.normals[b]
        out.append(MarketPath(t, d.regimes[b], dW, np.asarray(dY[b]), H, np.asarray(tau[b]), z0, start + b))
    return out


def run_filter(cfg: MarketConfig, path: MarketPath, p0=None, milstein: bool = True,
               exit_tol: float = EXIT_TOL, backend: str | None = None) -> FilterPath:
    """Normalized filter driven by the observed log returns and distress events."""
    mu, h, _, vol, gen = kernel_tables(cfg)
    p0 = np.array(cfg.initial_filter if p0 is None else p0, dtype=float)
    run = kernels.get("filter_path", backend)
    P, st, j = run(np.array(path.dY, order="C"), np.array(path.dstep, dtype=np.int64), p0,
                   path.z0.index, path.dt, mu, h, vol, gen, float(exit_tol), int(milstein))
    if st:
        raise FilterError(f"filter left the simplex at step {j}; reduce dt", step=j)
    return FilterPath(path.t, np.asarray(P), path.H)


def hmm_oracle_filter(cfg: MarketConfig, path: MarketPath, p0=None) -> FilterPath:
    """Discrete-time Bayes filter on the Euler-discretized model.

    Update with the Gaussian likelihood of the step's log returns and the
    distress/survival likelihood of each live stock, then predict with I + Q dt.
    """
    return hmm_oracle_batch(cfg, [path], p0)[0]


def hmm_oracle_batch(cfg: MarketConfig, paths, p0=None) -> list[FilterPath]:
    """hmm_oracle_filter for several paths on a common time grid, in lockstep."""
    N, K = cfg.n_stocks, cfg.n_regimes
    B = len(paths)
    dt = paths[0].dt
    n = paths[0].dY.shape[0]
    if any(p.dY.shape[0] != n for p in paths):
        raise ValueError("paths must share one time grid")
    dY = np.stack([p.dY for p in paths])  # (B, n, N)
    H = np.stack([p.H for p in paths])  # (B, n + 1, N)
    zi = (H << np.arange(N)).sum(axis=2)  # (B, n + 1)
    trans = np.eye(K) + cfg.generator * dt
    mu = cfg.mu_table()  # (N, K, S)
    h = cfg.intensity
    prec = 1.0 / cfg.volatility**2  # (N, S)
    surv = -h * dt
    jump = np.log(-np.expm1(-h * dt))
    p = np.tile(np.asarray(cfg.initial_filter if p0 is None else p0, dtype=float), (B, 1))
    out = np.empty((B, n + 1, K))
    out[:, 0] = p
    rows = np.arange(N)
    for j in range(n):
        z = zi[:, j]
        m = mu[:, :, z]  # (N, K, B)
        w = prec[:, z] * dY[:, j].T  # (N, B)
        logl = np.einsum("nkb,nb->bk", m, w) - 0.5 * dt * np.einsum("nkb,nb->bk", m * m, prec[:, z])
        live = H[:, j] == 0  # (B, N)
        hit = live & (H[:, j + 1] == 1)
        lj = np.where(hit[:, :, None], jump[rows[:, None], :, z].transpose(1, 0, 2),
                      surv[rows[:, None], :, z].transpose(1, 0, 2))  # (B, N, K)
        logl = logl + (lj * live[:, :, None]).sum(axis=1)
        post = p * np.exp(logl - logl.max(axis=1, keepdims=True))
        post /= post.sum(axis=1, keepdims=True)
        p = post @ trans
        p /= p.sum(axis=1, keepdims=True)
        out[:, j + 1] = p
    return [FilterPath(paths[b].t, out[b], paths[b].H) for b in range(B)]


def run_filter_tildeP(cfg: MarketConfig, sim: SimConfig, strategy, lam0=None, z0=None,
                      compensated: bool = True, start: int = 0):
    """Controlled filter under the reference measure, recorded path by path.

    Returns a list of (FilterPath, integral of eta_tilde).  Intended for small
    path counts; the verification estimators use the batched kernels.
    """
    from ._fallback import tildeP_batch

    sim.check(cfg)
    z0 = DistressState.zeros(cfg.n_stocks) if z0 is None else as_state(z0, cfg.n_stocks)
    p0 = cfg.initial_filter if lam0 is None else _as_probs(cfg, lam0)
    mu, h, bh, vol, gen = kernel_tables(cfg)
    d = draw_paths(cfg, sim, start, start + sim.n_paths, chain=False)
    n, N = sim.n_steps, cfg.n_stocks
    P_rec = np.empty((sim.n_paths, n + 1, cfg.n_regimes))
    Z_rec = np.empty((sim.n_paths, n + 1), dtype=np.int64)
    pi_fn = strategy.batch if hasattr(strategy, "batch") else _pointwise(cfg, strategy)

    def record(j, P, z):
        P_rec[:, j] = P
        Z_rec[:, j] = z

    acc, _, status = tildeP_batch(d.normals, d.thetas, np.asarray(p0, dtype=float), z0.index, sim.dt,
                                  int(compensated), mu, h, bh, vol, gen, cfg.rate, cfg.gamma,
                                  0, 1.0, None, None, 1.0, 1.0, EXIT_TOL, pi_fn=pi_fn, record=record)
    if np.any(status):
        raise FilterError("controlled filter left the simplex; reduce dt")
    t = np.arange(n + 1) * sim.dt
    bits = (Z_rec[:, :, None] >> np.arange(N)) & 1
    return [(FilterPath(t, P_rec[b], bits[b]), float(acc[b])) for b in range(sim.n_paths)]


def _as_probs(cfg: MarketConfig, lam) -> NDArray[np.float64]:
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.size == cfg.n_regimes:
        return lam
    return np.append(lam, 1.0 - lam.sum())


def _pointwise(cfg: MarketConfig, fn):
    """Lift fn(t, lam, z: DistressState) -> (N,) to the batched (t, P, zidx) form."""

    def batch(t, P, z):
        out = np.empty((P.shape[0], cfg.n_stocks))
        for b in range(P.shape[0]):
            zs = DistressState.from_index(int(z[b]), cfg.n_stocks)
            out[b] = np.asarray(fn(t, P[b, : cfg.n_regimes - 1], zs), dtype=float) * zs.mask
        return out

    return batch
