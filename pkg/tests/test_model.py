import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from contagion_hjb import model as m
from contagion_hjb.model import ConfigError, DistressState


def test_log_drift_hand_values(cfg):
    assert m.log_drift(cfg, 0, 0, "00") == pytest.approx(1.92, abs=1e-14)
    assert m.log_drift(cfg, 1, 1, "00") == pytest.approx(0.32, abs=1e-14)


def test_log_drift_cancels():
    c = m.benchmark(drift=[[0.5, 0.5], [1, 1]], intensity=[[0.5, 0.5], [1, 1]],
                    volatility=[np.sqrt(2), 1])
    assert m.log_drift(c, 0, 0, "00") == pytest.approx(0.0, abs=1e-15)


def test_tilde_interp():
    assert m.tilde_interp([1.0, 0.1], 0.5) == pytest.approx(0.55)
    assert m.tilde_interp([1.0, 0.1], 1.0) == pytest.approx(1.0)
    assert m.tilde_interp([1.0, 0.1], 0.0) == pytest.approx(0.1)


def test_sigma_matrix(cfg):
    s = m.sigma_matrix(cfg, 0.0, 0.5, "00")
    assert s.shape == (1, 2)
    np.testing.assert_allclose(s[0], [0.875, 0.7083333333333334], atol=1e-12)
    for lam in (0.0, 1.0):
        assert np.all(m.sigma_matrix(cfg, 0.0, lam, "00") == 0)


def test_gamma_vec(cfg):
    np.testing.assert_allclose(m.gamma_vec(cfg, 0.0, 0.0, "00"), [-0.6, -0.5], atol=1e-14)
    assert m.gamma_vec(cfg, 0.0, 1.0, "00")[0] == pytest.approx(-2.0)
    c = cfg.replace(rate=1.5, drift=[[0.5, 1.4], [0.5, 1.4]], intensity=[[1.0, 0.1], [1.0, 0.1]])
    np.testing.assert_allclose(m.gamma_vec(c, 0.0, 0.3, "00"), 0.0, atol=1e-14)


def test_beta_varpi(cfg):
    assert m.beta_varpi(cfg, 0, 0.0)[0] == pytest.approx(0.4)
    assert m.beta_varpi(cfg, 0, 4 / 9)[0] == pytest.approx(0.0, abs=1e-15)
    z = cfg.replace(generator=np.zeros((2, 2)))
    assert np.all(m.beta_varpi(z, 0, 0.3) == 0)


def test_theta_rho(cfg):
    th, rho = m.theta_rho(cfg, 0, 0.0, "00")
    assert th[0] == pytest.approx(0.4)
    # rho = gamma r - sum h + gamma/(2(1-gamma)) sum Gamma_i^2 / vol_i^2 at regime 2
    expect = -0.2 + 0.3 / 1.4 * (0.6**2 / 0.4**2 + 0.5**2 / 0.6**2)
    assert rho == pytest.approx(expect, abs=1e-12)
    assert rho == pytest.approx(0.430952380952381, abs=1e-12)
    c = cfg.replace(rate=0.05)
    th, rho = m.theta_rho(c, 0, 0.3, "11")
    assert th[0] == pytest.approx(m.beta_varpi(c, 0, 0.3)[0])
    assert rho == pytest.approx(0.3 * 0.05)
    th, _ = m.theta_rho(cfg.replace(gamma=1e-12), 0, 0.3, "00")
    assert th[0] == pytest.approx(m.beta_varpi(cfg, 0, 0.3)[0], abs=1e-10)


def test_jump_revision(cfg):
    assert m.jump_revision(cfg, 0, 0.5, 0, "00") == pytest.approx(0.5 / 0.55)
    assert m.jump_revision(cfg, 0, 0.0, 0, "00") == pytest.approx(0.0)
    flat = cfg.replace(intensity=[[0.7, 0.7], [1, 1]])
    assert m.jump_revision(flat, 0, 0.37, 0, "00") == pytest.approx(0.37)
    with pytest.raises(ValueError):
        m.jump_revision(cfg, 0, 0.5, 0, "10")


def test_flip():
    assert m.flip(DistressState((0, 0)), 0).label == "10"
    assert m.flip(DistressState((0, 1)), 0).label == "11"
    with pytest.raises(ValueError):
        m.flip(DistressState((1, 0)), 0)


def test_all_states_order():
    labels = [z.label for z in m.all_states(2)]
    assert labels[0] == "11" and labels[-1] == "00"
    assert sorted(labels) == ["00", "01", "10", "11"]


def test_config_validation():
    with pytest.raises(ConfigError):
        m.benchmark(gamma=1.0)
    with pytest.raises(ConfigError):
        m.benchmark(volatility=[0.0, 0.6])
    with pytest.raises(ConfigError):
        m.benchmark(generator=[[0.5, -0.5], [-0.4, 0.4]])


def test_config_frozen(cfg):
    with pytest.raises(ValueError):
        cfg.drift[0, 0, 0] = 3.0


def test_symmetry_detection(cfg):
    assert not m.transposition_symmetric(cfg, 0, 1)
    sym = cfg.replace(drift=[[1, 0.5], [1, 0.5]], volatility=[0.5, 0.5])
    assert m.transposition_symmetric(sym, 0, 1)


probs = st.floats(0.0, 1.0, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(probs, st.sampled_from(["00", "01", "10"]), st.integers(0, 1))
def test_jump_revision_stays_in_simplex(lam, z, i):
    cfg = m.benchmark()
    if DistressState.from_label(z).bits[i]:
        return
    out = float(m.jump_revision(cfg, 0, lam, i, z))
    assert 0.0 <= out <= 1.0
    # h1 is larger in regime 1, so a distress moves mass toward it
    assert out >= lam - 1e-15


@settings(max_examples=200, deadline=None)
@given(probs)
def test_sigma_vanishes_at_vertices_and_is_bounded(lam):
    cfg = m.benchmark()
    s = m.sigma_matrix(cfg, 0, lam, "00")
    assert np.all(np.abs(s) <= 0.25 * np.array([1.4, 1.7]) / np.array([0.4, 0.6]) + 1e-12)


@settings(max_examples=100, deadline=None)
@given(probs, st.sampled_from(["00", "01", "10", "11"]))
def test_compensator_matches_jump_revision(lam, z):
    """Between-jump drift equals minus the sum of (revision - lambda) * h_tilde."""
    cfg = m.benchmark()
    zs = DistressState.from_label(z)
    c = m.compensator_drift(cfg, 0, lam, zs)[0]
    ref = 0.0
    for i in zs.live:
        ht = m.tilde_intensity(cfg, 0, lam, zs)[i]
        ref -= (float(m.jump_revision(cfg, 0, lam, i, zs)) - lam) * ht
    assert c == pytest.approx(ref, abs=1e-12)
