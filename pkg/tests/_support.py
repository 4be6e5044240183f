"""Shared helpers for the statistical tests."""

import numpy as np

from contagion_hjb.filter import SimConfig, hmm_oracle_batch, run_filter, simulate_truth
from contagion_hjb.model import generator_from_rates


def filter_unbiasedness(cfg, dt, horizon, n_paths, seed=7, batch=2000):
    """Per-path filter p_1(T) and the indicator of regime 1 at T."""
    p_T = np.empty(n_paths)
    x_T = np.empty(n_paths)
    for a in range(0, n_paths, batch):
        b = min(a + batch, n_paths)
        sim = SimConfig(dt, horizon, seed, b - a)
        for k, path in enumerate(simulate_truth(cfg, sim, start=a)):
            p_T[a + k] = run_filter(cfg, path).p[-1, 0]
            x_T[a + k] = path.regimes[-1] == 0
    return p_T, x_T


def prior_propagated(cfg, t):
    """p0 exp(Q t) for K = 2."""
    q = cfg.generator
    a, b = q[0, 1], q[1, 0]
    pi1 = b / (a + b)
    return pi1 + (cfg.initial_filter[0] - pi1) * np.exp(-(a + b) * t)


def oracle_discrepancy(cfg, dt, n_paths, horizon=None, seed=11):
    """Mean over paths of the sup-norm gap between the filter and the Bayes oracle."""
    horizon = cfg.horizon if horizon is None else horizon
    paths = simulate_truth(cfg, SimConfig(dt, horizon, seed, n_paths))
    oracle = hmm_oracle_batch(cfg, paths)
    gaps = [np.abs(run_filter(cfg, p).lam - o.lam).max() for p, o in zip(paths, oracle)]
    return float(np.mean(gaps)), float(np.max(gaps))


def flat_config(cfg, p0=0.9):
    """Regimes indistinguishable by prices and distress; chain rates kept."""
    return cfg.replace(drift=[[1.0, 1.0], [1.2, 1.2]], intensity=[[0.3, 0.3], [0.3, 0.3]],
                       initial_filter=[p0, 1 - p0], generator=generator_from_rates([[0, .5], [.4, 0]]))


def oracle_reference(cfg, path):
    """Straight per-step loop of the Bayes oracle, for checking the batched version."""
    N, K = cfg.n_stocks, cfg.n_regimes
    dt = path.dt
    p = np.asarray(cfg.initial_filter, dtype=float).copy()
    trans = np.eye(K) + cfg.generator * dt
    mu = cfg.mu_table()
    out = [p]
    for j in range(path.dY.shape[0]):
        zi = int(np.dot(path.H[j], 1 << np.arange(N)))
        prec = 1.0 / cfg.volatility[:, zi] ** 2
        m = mu[:, :, zi]
        logl = (m * (prec * path.dY[j])[:, None]).sum(axis=0) - 0.5 * (m * m * prec[:, None]).sum(axis=0) * dt
        for i in range(N):
            if path.H[j, i]:
                continue
            hk = cfg.intensity[i, :, zi]
            logl = logl + (np.log(-np.expm1(-hk * dt)) if path.H[j + 1, i] else -hk * dt)
        post = p * np.exp(logl - logl.max())
        p = post / post.sum() @ trans
        p = p / p.sum()
        out.append(p)
    return np.array(out)


# one line per acceptance criterion, printed in the terminal summary
RESULTS: dict = {}


def record(number, ok, detail):
    RESULTS[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[number], flush=True)
    return ok
