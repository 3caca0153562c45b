import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from uvb import mcmc


@given(st.floats(-20, 20), st.floats(1e-9, 1 - 1e-9))
def test_accept_rule(delta, u):
    assert mcmc.metropolis_accept(delta, u) == (delta >= 0 or np.log(u) < delta)


def test_nan_rejected():
    assert not mcmc.metropolis_accept(np.nan, 0.5)


def test_samples_correlated_normal():
    cov = np.array([[1.0, 0.8], [0.8, 2.0]])
    prec = np.linalg.inv(cov)
    res = mcmc.rwmh_sample(lambda x: -0.5 * x @ prec @ x, 2,
                           mcmc.ChainConfig(40000, 5000, seed=1, thin=2), x0=[3.0, -3.0])
    assert_allclose(res.draws.mean(axis=0), 0.0, atol=0.1)
    assert_allclose(np.cov(res.draws.T), cov, atol=0.15)
    assert 0.1 < res.acceptance_rate < 0.5


def test_chain_is_reproducible():
    cfg = mcmc.ChainConfig(2000, 1000, seed=3)
    a = mcmc.rwmh_sample(lambda x: -0.5 * x @ x, 3, cfg)
    b = mcmc.rwmh_sample(lambda x: -0.5 * x @ x, 3, cfg)
    assert np.array_equal(a.draws, b.draws)


def test_stuck_chain_warns():
    # a spike the frozen proposal can never leave
    target = lambda x: 0.0 if abs(x[0]) < 1e-12 else -np.inf
    with pytest.warns(RuntimeWarning, match="no proposal accepted"):
        mcmc.rwmh_sample(target, 1, mcmc.ChainConfig(2200, 100, seed=0, adapt_covariance=False), x0=[0.0])


def test_bad_start_rejected():
    with pytest.raises(ValueError):
        mcmc.rwmh_sample(lambda x: -np.inf, 1, mcmc.ChainConfig(10, 5))


@pytest.mark.parametrize("kw", [dict(iterations=5, burn_in=5), dict(iterations=10, burn_in=2, thin=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        mcmc.ChainConfig(**kw)
