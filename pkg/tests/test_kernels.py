"""The compiled kernels and the numpy fallback must agree."""

import numpy as np
import pytest

from contagion_hjb import kernels
from contagion_hjb.filter import SimConfig, run_filter, simulate_truth
from contagion_hjb.model import benchmark, generator_from_rates
from contagion_hjb.strategy import ConstantStrategy, FeedbackStrategy
from contagion_hjb.verify import utility_samples

pytestmark = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")


def three_regimes():
    return benchmark(n_regimes=3, drift=[[1, .7, .5], [1.2, .8, .4]], intensity=[[1, .5, .1], [1, .4, .1]],
                     generator=generator_from_rates([[0, .3, .2], [.2, 0, .3], [.1, .3, 0]]),
                     initial_filter=[.3, .3, .4])


@pytest.mark.parametrize("make", [benchmark, three_regimes])
def test_truth_and_filter(make):
    cfg = make()
    sim = SimConfig(2e-3, 3.0, 4, 30)
    a = simulate_truth(cfg, sim, backend="python")
    b = simulate_truth(cfg, sim, backend="cython")
    for pa, pb in zip(a, b):
        np.testing.assert_allclose(pa.dY, pb.dY, atol=1e-15)
        assert np.array_equal(pa.H, pb.H)
        fa = run_filter(cfg, pa, backend="python").p
        fb = run_filter(cfg, pa, backend="cython").p
        np.testing.assert_allclose(fa, fb, atol=1e-11)


@pytest.mark.parametrize("which", ["tildeP", "physical"])
def test_estimators_feedback(small_surfaces, which):
    cfg = benchmark()
    strat = FeedbackStrategy(cfg, small_surfaces)
    sim = SimConfig(5e-3, 3.0, 1, 200)
    a = utility_samples(cfg, sim, strat, 0.5, "00", which=(which,), backend="python")[which]
    b = utility_samples(cfg, sim, strat, 0.5, "00", which=(which,), backend="cython")[which]
    np.testing.assert_allclose(a, b, rtol=1e-9)


@pytest.mark.parametrize("make", [benchmark, three_regimes])
@pytest.mark.parametrize("which", ["tildeP", "physical"])
def test_estimators_constant(make, which):
    cfg = make()
    strat = ConstantStrategy(cfg, [1.5, 0.7])
    sim = SimConfig(5e-3, 3.0, 2, 200)
    p0 = cfg.initial_filter[:-1] if cfg.n_regimes > 2 else 0.5
    a = utility_samples(cfg, sim, strat, p0, "00", which=(which,), backend="python")[which]
    b = utility_samples(cfg, sim, strat, p0, "00", which=(which,), backend="cython")[which]
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_threads_do_not_change_results(small_surfaces):
    cfg = benchmark()
    strat = FeedbackStrategy(cfg, small_surfaces)
    sim = SimConfig(5e-3, 3.0, 3, 1000)
    a = utility_samples(cfg, sim, strat, 0.5, "00", threads=1, batch=250)
    b = utility_samples(cfg, sim, strat, 0.5, "00", threads=4, batch=250)
    c = utility_samples(cfg, sim, strat, 0.5, "00", threads=1, batch=1000)
    for k in a:
        assert np.array_equal(a[k], b[k]) and np.array_equal(a[k], c[k])
