"""Model primitives and coefficient functions.

Tables are stored densely over all 2^N distress states.  A distress state z
is encoded as the integer sum(z_i << i), so stock 0 is the lowest bit.
Stocks and regimes are 0-based throughout the API.

For K = 2 the filter coordinate is the scalar lambda = P(X = e_1); every
coefficient function then accepts scalars or arrays of lambda values.  For
K > 2, lambda carries a trailing axis of length K-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

ROW_SUM_TOL = 1e-12


class ConfigError(ValueError):
    """Raised for invalid model or experiment configuration."""


@dataclass(frozen=True, order=True)
class DistressState:
    """Binary distress vector z; bits[i] = 1 means stock i is distressed."""

    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"distress bits must be 0/1, got {self.bits}")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def zeros(cls, n: int) -> "DistressState":
        return cls((0,) * n)

    @classmethod
    def ones(cls, n: int) -> "DistressState":
        return cls((1,) * n)

    @classmethod
    def from_index(cls, idx: int, n: int) -> "DistressState":
        return cls(tuple((idx >> i) & 1 for i in range(n)))

    @classmethod
    def from_label(cls, label: str) -> "DistressState":
        return cls(tuple(int(c) for c in label))

    @property
    def n(self) -> int:
        return len(self.bits)

    @property
    def index(self) -> int:
        return sum(b << i for i, b in enumerate(self.bits))

    @property
    def label(self) -> str:
        return "".join(str(b) for b in self.bits)

    @property
    def popcount(self) -> int:
        return sum(self.bits)

    @property
    def live(self) -> list[int]:
        return [i for i, b in enumerate(self.bits) if b == 0]

    @property
    def mask(self) -> NDArray[np.float64]:
        """The vector 1 - z."""
        return 1.0 - np.asarray(self.bits, dtype=float)

    def flip(self, i: int) -> "DistressState":
        return flip(self, i)

    def __str__(self) -> str:
        return self.label


def flip(z: DistressState, i: int) -> DistressState:
    """Set bit i of z; only allowed when stock i is not yet distressed."""
    if not 0 <= i < z.n:
        raise IndexError(f"stock index {i} out of range for N={z.n}")
    if z.bits[i] == 1:
        raise ValueError(f"stock {i} already distressed in state {z.label}")
    bits = list(z.bits)
    bits[i] = 1
    return DistressState(tuple(bits))


def all_states(n: int) -> list[DistressState]:
    """All 2^n states, ordered by decreasing popcount then by index."""
    states = [DistressState(tuple(reversed(b))) for b in product((0, 1), repeat=n)]
    return sorted(states, key=lambda s: (-s.popcount, s.index))


def as_state(z, n: int) -> DistressState:
    if isinstance(z, DistressState):
        st = z
    elif isinstance(z, str):
        st = DistressState.from_label(z)
    else:
        st = DistressState(tuple(z))
    if st.n != n:
        raise ValueError(f"distress state {st.label} has length {st.n}, expected {n}")
    return st


def _frozen(a, dtype=float) -> NDArray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MarketConfig:
    """All model primitives.

    drift, intensity: shape (N, K, 2^N); volatility: shape (N, 2^N);
    generator: K x K with nonnegative off-diagonal rates and zero row sums.
    """

    n_stocks: int
    n_regimes: int
    rate: float
    gamma: float
    horizon: float
    generator: NDArray[np.float64]
    drift: NDArray[np.float64]
    intensity: NDArray[np.float64]
    volatility: NDArray[np.float64]
    initial_filter: NDArray[np.float64]
    initial_wealth: float = 1.0

    def __post_init__(self):
        n, k = int(self.n_stocks), int(self.n_regimes)
        if n < 1 or k < 1:
            raise ConfigError("n_stocks and n_regimes must be positive")
        s = 1 << n
        object.__setattr__(self, "n_stocks", n)
        object.__setattr__(self, "n_regimes", k)
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "initial_wealth", float(self.initial_wealth))

        gen = _frozen(self.generator)
        drift = _frozen(_expand_table(self.drift, n, k, "drift"))
        inten = _frozen(_expand_table(self.intensity, n, k, "intensity"))
        vol = _frozen(_expand_vol(self.volatility, n))
        p0 = _frozen(self.initial_filter)
        object.__setattr__(self, "generator", gen)
        object.__setattr__(self, "drift", drift)
        object.__setattr__(self, "intensity", inten)
        object.__setattr__(self, "volatility", vol)
        object.__setattr__(self, "initial_filter", p0)

        if not (0.0 < self.gamma < 1.0):
            raise ConfigError(f"gamma must lie in (0,1), got {self.gamma}")
        if self.rate < 0:
            raise ConfigError("rate must be >= 0")
        if self.horizon <= 0:
            raise ConfigError("horizon must be > 0")
        if self.initial_wealth <= 0:
            raise ConfigError("initial_wealth must be > 0")
        if gen.shape != (k, k):
            raise ConfigError(f"generator must be {k}x{k}, got {gen.shape}")
        off = gen[~np.eye(k, dtype=bool)]
        if np.any(off < 0):
            raise ConfigError("generator off-diagonal entries must be >= 0")
        if np.any(np.abs(gen.sum(axis=1)) > ROW_SUM_TOL):
            raise ConfigError("generator rows must sum to 0")
        if drift.shape != (n, k, s) or inten.shape != (n, k, s):
            raise ConfigError("drift/intensity tables have wrong shape")
        if not np.all(np.isfinite(drift)):
            raise ConfigError("drift table must be finite")
        if not np.all(inten > 0) or not np.all(np.isfinite(inten)):
            raise ConfigError("every intensity entry must be strictly positive")
        if vol.shape != (n, s) or not np.all(vol > 0):
            raise ConfigError("every volatility entry must be strictly positive")
        if p0.shape != (k,) or np.any(p0 < 0) or abs(p0.sum() - 1.0) > 1e-9:
            raise ConfigError("initial_filter must be a probability vector of length K")

    @property
    def n_states(self) -> int:
        return 1 << self.n_stocks

    def replace(self, **kw) -> "MarketConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return MarketConfig(**d)

    def mu_table(self) -> NDArray[np.float64]:
        """Log-price drift mu[i, k, s] = b + h - vartheta^2/2."""
        return self.drift + self.intensity - 0.5 * self.volatility[:, None, :] ** 2


def _expand_table(a, n: int, k: int, name: str) -> NDArray[np.float64]:
    arr = np.asarray(a, dtype=float)
    if arr.shape == (n, k):
        arr = np.repeat(arr[:, :, None], 1 << n, axis=2)
    if arr.shape != (n, k, 1 << n):
        raise ConfigError(f"{name}: expected shape ({n},{k}) or ({n},{k},{1 << n}), got {arr.shape}")
    return arr


def _expand_vol(a, n: int) -> NDArray[np.float64]:
    arr = np.asarray(a, dtype=float)
    if arr.shape == (n,):
        arr = np.repeat(arr[:, None], 1 << n, axis=1)
    if arr.shape != (n, 1 << n):
        raise ConfigError(f"volatility: expected shape ({n},) or ({n},{1 << n}), got {arr.shape}")
    return arr


def generator_from_rates(rates) -> NDArray[np.float64]:
    """Build a generator from an off-diagonal matrix of jump rates."""
    q = np.array(rates, dtype=float)
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return q


def benchmark(**overrides) -> MarketConfig:
    """Two stocks, two regimes, the reference parameter set."""
    params = dict(
        n_stocks=2,
        n_regimes=2,
        rate=0.0,
        gamma=0.3,
        horizon=3.0,
        generator=generator_from_rates([[0.0, 0.5], [0.4, 0.0]]),
        drift=[[1.0, 0.5], [1.2, 0.4]],
        intensity=[[1.0, 0.1], [1.0, 0.1]],
        volatility=[0.4, 0.6],
        initial_filter=[0.5, 0.5],
        initial_wealth=1.0,
    )
    params.update(overrides)
    return MarketConfig(**params)


# ---------------------------------------------------------------------------
# simplex helpers


def full_probs(cfg: MarketConfig, lam) -> NDArray[np.float64]:
    """Recover (lambda_1, ..., lambda_{K-1}, 1 - sum) with a trailing K axis."""
    lam = np.asarray(lam, dtype=float)
    if cfg.n_regimes == 2:
        return np.stack([lam, 1.0 - lam], axis=-1)
    if lam.shape[-1:] != (cfg.n_regimes - 1,):
        raise ValueError(f"lambda must have trailing length {cfg.n_regimes - 1}")
    return np.concatenate([lam, 1.0 - lam.sum(axis=-1, keepdims=True)], axis=-1)


def reduced(cfg: MarketConfig, p) -> NDArray[np.float64]:
    """Inverse of full_probs."""
    p = np.asarray(p, dtype=float)
    if cfg.n_regimes == 2:
        return p[..., 0]
    return p[..., :-1]


def tilde_interp(values, lam) -> NDArray[np.float64] | float:
    """g(e_K) + sum_k (g(e_k) - g(e_K)) lambda_k."""
    values = np.asarray(values, dtype=float)
    k = values.shape[0]
    lam = np.asarray(lam, dtype=float)
    if k == 2 and (lam.ndim == 0 or lam.shape[-1:] != (1,)):
        out = values[1] + (values[0] - values[1]) * lam
    else:
        if lam.shape[-1:] != (k - 1,):
            raise ValueError(f"length mismatch: {k} regime values, lambda trailing dim {lam.shape[-1:]}")
        out = values[k - 1] + (lam * (values[: k - 1] - values[k - 1])).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _tilde_table(cfg: MarketConfig, table: NDArray, lam) -> NDArray[np.float64]:
    """Interpolate an (N, K) slice over regimes; returns (..., N)."""
    p = full_probs(cfg, lam)
    return p @ table.T


# ---------------------------------------------------------------------------
# coefficient functions


def log_drift(cfg: MarketConfig, i: int, k: int, z) -> float:
    z = as_state(z, cfg.n_stocks)
    if not (0 <= i < cfg.n_stocks and 0 <= k < cfg.n_regimes):
        raise IndexError(f"index out of range: i={i}, k={k}")
    s = z.index
    return float(cfg.drift[i, k, s] + cfg.intensity[i, k, s] - 0.5 * cfg.volatility[i, s] ** 2)


def mu_matrix(cfg: MarketConfig, z) -> NDArray[np.float64]:
    """mu(e_k, z) as an N x K matrix."""
    z = as_state(z, cfg.n_stocks)
    return cfg.mu_table()[:, :, z.index]


def tilde_intensity(cfg: MarketConfig, t, lam, z) -> NDArray[np.float64]:
    z = as_state(z, cfg.n_stocks)
    return _tilde_table(cfg, cfg.intensity[:, :, z.index], lam)


def tilde_drift(cfg: MarketConfig, t, lam, z) -> NDArray[np.float64]:
    z = as_state(z, cfg.n_stocks)
    return _tilde_table(cfg, cfg.drift[:, :, z.index], lam)


def sigma_matrix(cfg: MarketConfig, t, lam, z) -> NDArray[np.float64]:
    """diag(lambda) [mu_perp^T - 1 mu_tilde^T] Sigma^{-1}, shape (..., K-1, N)."""
    z = as_state(z, cfg.n_stocks)
    mu = mu_matrix(cfg, z)
    p = full_probs(cfg, lam)
    mu_t = p @ mu.T  # (..., N)
    k1 = cfg.n_regimes - 1
    diff = mu.T[:k1, :] - mu_t[..., None, :]  # (..., K-1, N)
    return p[..., :k1, None] * diff / cfg.volatility[:, z.index]


def masked_sigma(cfg: MarketConfig, t, lam, z) -> NDArray[np.float64]:
    """sigma with the columns of distressed stocks zeroed."""
    z = as_state(z, cfg.n_stocks)
    return sigma_matrix(cfg, t, lam, z) * z.mask


def gamma_vec(cfg: MarketConfig, t, lam, z) -> NDArray[np.float64]:
    """Gamma_i = r - b_tilde_i - h_tilde_i, shape (..., N)."""
    return cfg.rate - tilde_drift(cfg, t, lam, z) - tilde_intensity(cfg, t, lam, z)


def beta_varpi(cfg: MarketConfig, t, lam) -> NDArray[np.float64]:
    """Generator drift of the filter, shape (..., K-1)."""
    p = full_probs(cfg, lam)
    return (p @ cfg.generator)[..., : cfg.n_regimes - 1]


def compensator_drift(cfg: MarketConfig, t, lam, z) -> NDArray[np.float64]:
    """Between-jump filter drift from the compensated distress martingales.

    Component k equals -sum_i (1 - z_i) lambda_k (h_i(e_k) - h_tilde_i).
    """
    z = as_state(z, cfg.n_stocks)
    p = full_probs(cfg, lam)
    h = cfg.intensity[:, :, z.index]  # (N, K)
    ht = p @ h.T  # (..., N)
    k1 = cfg.n_regimes - 1
    dev = h.T[:k1, :] - ht[..., None, :]  # (..., K-1, N)
    return -(p[..., :k1] * (dev * z.mask).sum(axis=-1))


def theta_rho(cfg: MarketConfig, t, lam, z):
    """Drift theta (..., K-1) and source rho (...) of the HJB equation."""
    z = as_state(z, cfg.n_stocks)
    g = cfg.gamma
    vol = cfg.volatility[:, z.index]
    sig_z = masked_sigma(cfg, t, lam, z)
    gam = gamma_vec(cfg, t, lam, z)
    theta = beta_varpi(cfg, t, lam) - g / (1 - g) * (sig_z * (gam / vol)[..., None, :]).sum(axis=-1)
    gam_z = gam * z.mask
    ht = tilde_intensity(cfg, t, lam, z)
    rho = g * cfg.rate - (ht * z.mask).sum(axis=-1) \
        + g / (2 * (1 - g)) * (gam_z**2 / vol**2).sum(axis=-1)
    return theta, rho


def jump_revision(cfg: MarketConfig, t, lam, i: int, z):
    """Filter after a distress of stock i: lambda_k h_i(e_k) / h_tilde_i."""
    z = as_state(z, cfg.n_stocks)
    if z.bits[i] == 1:
        raise ValueError(f"stock {i} already distressed in state {z.label}")
    h = cfg.intensity[i, :, z.index]
    p = full_probs(cfg, lam)
    post = p * h / (p @ h)[..., None]
    return reduced(cfg, post)


def eta_tilde(cfg: MarketConfig, t, lam, z, pi) -> NDArray[np.float64]:
    """-r + pi^T Gamma + (1-gamma)/2 pi^T Sigma Sigma^T pi."""
    z = as_state(z, cfg.n_stocks)
    pi = np.asarray(pi, dtype=float)
    vol = cfg.volatility[:, z.index]
    gam = gamma_vec(cfg, t, lam, z)
    return -cfg.rate + (pi * gam).sum(axis=-1) + 0.5 * (1 - cfg.gamma) * (pi**2 * vol**2).sum(axis=-1)


def stationary_law(cfg: MarketConfig) -> NDArray[np.float64]:
    """Stationary distribution of the regime chain."""
    k = cfg.n_regimes
    a = np.vstack([cfg.generator.T, np.ones(k)])
    rhs = np.zeros(k + 1)
    rhs[-1] = 1.0
    return np.linalg.lstsq(a, rhs, rcond=None)[0]


def transposition_symmetric(cfg: MarketConfig, i: int, j: int, atol: float = 0.0) -> bool:
    """True when swapping stocks i and j leaves all tables invariant."""
    n = cfg.n_stocks
    perm = list(range(n))
    perm[i], perm[j] = j, i
    src = np.empty(cfg.n_states, dtype=int)
    for s in range(cfg.n_states):
        bits = DistressState.from_index(s, n).bits
        src[s] = DistressState(tuple(bits[perm[q]] for q in range(n))).index
    # table'[q, k, s] = table[perm[q], k, swap(s)]
    for tab in (cfg.drift, cfg.intensity):
        if not np.allclose(tab[perm][:, :, src], tab, rtol=0.0, atol=atol):
            return False
    return bool(np.allclose(cfg.volatility[perm][:, src], cfg.volatility, rtol=0.0, atol=atol))
