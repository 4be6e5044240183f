import numpy as np
import pytest

from contagion_hjb.filter import (
    FilterError, MarketPath, SimConfig, coarsen_normals, draw_paths, hmm_oracle_filter, path_rng,
    run_filter, run_filter_tildeP, simulate_truth,
)
from contagion_hjb.model import DistressState, benchmark, generator_from_rates
from contagion_hjb.strategy import ConstantStrategy

from _support import flat_config, oracle_discrepancy


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(dt=0.7, horizon=1.0)
    assert SimConfig(1e-3, 3.0).n_steps == 3000


def test_large_step_warns(cfg):
    with pytest.warns(RuntimeWarning):
        SimConfig(0.5, 3.0).check(cfg.replace(intensity=[[2, .1], [1, .1]]))


def test_streams_are_reproducible():
    a = path_rng(3, 17).standard_normal(5)
    b = path_rng(3, 17).standard_normal(5)
    c = path_rng(3, 18).standard_normal(5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_path_draws_independent_of_batching(cfg):
    sim = SimConfig(0.01, 1.0, 5, 6)
    whole = draw_paths(cfg, sim, 0, 6)
    part = draw_paths(cfg, sim, 3, 6)
    assert np.array_equal(whole.normals[3:], part.normals)
    assert np.array_equal(whole.regimes[3:], part.regimes)


def test_coarsen_normals_unit_variance():
    z = np.random.default_rng(0).standard_normal((200, 400, 2))
    c = coarsen_normals(z, 2)
    assert c.shape == (200, 200, 2)
    assert c.std() == pytest.approx(1.0, abs=0.01)
    np.testing.assert_allclose(c[0, 0], (z[0, 0] + z[0, 1]) / np.sqrt(2))


def test_no_distress_without_intensity(cfg):
    # intensities must be positive, so "zero" is a negligible rate
    c = cfg.replace(intensity=np.full((2, 2), 1e-12))
    for p in simulate_truth(c, SimConfig(0.01, 3.0, 1, 200)):
        assert p.H.sum() == 0 and np.all(np.isinf(p.tau))


def test_survival_is_exponential(cfg):
    c = cfg.replace(intensity=[[0.5, 0.5], [0.5, 0.5]], horizon=1.0)
    n = 100_000
    paths = simulate_truth(c, SimConfig(0.01, 1.0, 2, n))
    alive = np.array([p.H[-1, 0] == 0 for p in paths], dtype=float)
    se = np.sqrt(np.exp(-0.5) * (1 - np.exp(-0.5)) / n)
    assert abs(alive.mean() - np.exp(-0.5)) < 3 * se
    taus = np.array([p.tau[0] for p in paths])
    dead = taus[np.isfinite(taus)]
    assert np.all((dead > 0) & (dead <= 1.0))


def test_chain_occupation_matches_stationary_law(cfg):
    c = cfg.replace(horizon=60.0)
    n = 2000
    paths = simulate_truth(c, SimConfig(0.05, 60.0, 3, n))
    occ = np.array([np.mean(p.regimes[200:] == 0) for p in paths])
    assert abs(occ.mean() - 4 / 9) < 3 * occ.std() / np.sqrt(n) + 1e-3


def test_filter_constant_without_information(cfg):
    c = cfg.replace(drift=[[1, 1], [1.2, 1.2]], intensity=[[.3, .3], [.3, .3]], generator=np.zeros((2, 2)),
                    initial_filter=[0.3, 0.7])
    path = simulate_truth(c, SimConfig(0.01, 3.0, 4, 1))[0]
    np.testing.assert_allclose(run_filter(c, path).lam, 0.3, atol=1e-14)
    np.testing.assert_allclose(hmm_oracle_filter(c, path).lam, 0.3, atol=1e-14)


@pytest.mark.parametrize("dt", [1e-2, 1e-3])
def test_filter_relaxes_deterministically(cfg, dt):
    c = flat_config(cfg)
    path = simulate_truth(c, SimConfig(dt, 3.0, 5, 1))[0]
    lam = run_filter(c, path).lam
    exact = 4 / 9 + (0.9 - 4 / 9) * np.exp(-0.9 * path.t)
    assert np.max(np.abs(lam - exact)) < 0.2 * dt


def test_filter_relaxation_error_is_first_order(cfg):
    c = flat_config(cfg)
    errs = []
    for dt in (2e-2, 1e-2, 5e-3):
        path = simulate_truth(c, SimConfig(dt, 3.0, 5, 1))[0]
        exact = 4 / 9 + (0.9 - 4 / 9) * np.exp(-0.9 * path.t)
        errs.append(np.max(np.abs(run_filter(c, path).lam - exact)))
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.1)


def _one_step_path(cfg, dy):
    t = np.array([0.0, 0.01])
    H = np.zeros((2, 2), dtype=np.int64)
    return MarketPath(t, np.zeros(2, dtype=np.int64), np.zeros((1, 2)), np.array([[dy, 0.0]]), H,
                      np.full(2, np.inf), DistressState.zeros(2))


def test_oracle_monotone_in_signal(cfg):
    c = cfg.replace(generator=np.zeros((2, 2)))
    post = [hmm_oracle_filter(c, _one_step_path(c, dy)).lam[-1] for dy in (0.0, 0.05, 0.1, 0.2, 0.4)]
    assert np.all(np.diff(post) > 0)


def test_distress_revises_filter(cfg):
    c = cfg.replace(generator=np.zeros((2, 2)))
    path = _one_step_path(c, 0.0)
    path.H[1, 0] = 1
    lam = hmm_oracle_filter(c, path).lam[-1]
    assert lam > 0.8


def test_filter_close_to_oracle(cfg):
    mean, worst = oracle_discrepancy(cfg, 1e-3, 20, horizon=3.0)
    assert mean < 0.02


def test_filter_exit_raises(cfg):
    c = cfg.replace(volatility=[0.01, 0.01])
    path = simulate_truth(c, SimConfig(0.1, 3.0, 0, 1))[0]
    with pytest.raises(FilterError):
        run_filter(c, path, milstein=False)


def test_coarsened_path_matches_coarse_simulation_law(cfg):
    path = simulate_truth(cfg, SimConfig(1e-3, 3.0, 9, 1))[0]
    co = path.coarsen(2)
    assert co.dY.shape[0] == 1500
    np.testing.assert_allclose(co.Y[-1], path.Y[-1])


def test_tildeP_cash_accumulates_nothing(cfg):
    out = run_filter_tildeP(cfg, SimConfig(0.01, 3.0, 0, 20), ConstantStrategy(cfg, [0, 0]), 0.5)
    assert all(acc == 0.0 for _, acc in out)


def test_tildeP_flat_regimes_follow_ode(cfg):
    c = flat_config(cfg)
    out = run_filter_tildeP(c, SimConfig(1e-3, 3.0, 0, 3), ConstantStrategy(c, [0, 0]), 0.9)
    t = out[0][0].t
    exact = 4 / 9 + (0.9 - 4 / 9) * np.exp(-0.9 * t)
    for fp, _ in out:
        assert np.max(np.abs(fp.lam - exact)) < 1e-3


def test_tildeP_literal_vs_compensated_differ(cfg):
    s = SimConfig(1e-3, 3.0, 0, 5)
    a = run_filter_tildeP(cfg, s, ConstantStrategy(cfg, [0, 0]), 0.5, compensated=True)
    b = run_filter_tildeP(cfg, s, ConstantStrategy(cfg, [0, 0]), 0.5, compensated=False)
    assert not np.allclose(a[0][0].lam, b[0][0].lam)
    for fp, _ in a + b:
        assert fp.lam.min() >= 0 and fp.lam.max() <= 1


def test_tildeP_distress_matches_intensity_integral(cfg):
    """E[H_i(T)] = E[int (1 - H_i) h_tilde_i ds] along the simulated filter."""
    n, dt = 4000, 2e-3
    out = run_filter_tildeP(cfg, SimConfig(dt, 3.0, 1, n), ConstantStrategy(cfg, [0, 0]), 0.5)
    h = cfg.intensity
    hits = np.zeros((n, 2))
    comp = np.zeros((n, 2))
    for b, (fp, _) in enumerate(out):
        hits[b] = fp.H[-1]
        H = fp.H[:-1]
        zi = H[:, 0] + 2 * H[:, 1]
        lam = fp.lam[:-1, None]
        ht = lam * h[:, 0, zi].T + (1 - lam) * h[:, 1, zi].T
        comp[b] = ((1 - H) * ht).sum(axis=0) * dt
    d = hits - comp
    se = d.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(d.mean(axis=0)) < 3 * se + dt)
