import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose
from scipy.special import digamma

from uvb import mfvb
from uvb.dpm import dpm_simulate


def test_expected_log_sigma2_matches_closed_form():
    # E[log sigma2] under InvGamma(alpha, kappa) is log kappa - digamma(alpha)
    u = np.random.default_rng(0).random(200_000)
    alpha, kappa = np.array([2.0, 7.5]), np.array([0.3, 4.0])
    assert_allclose(mfvb.expected_log_sigma2(alpha, kappa, u), np.log(kappa) - digamma(alpha), atol=0.01)


def test_expected_log_stick_matches_monte_carlo():
    rng = np.random.default_rng(1)
    a, b = np.array([2.0, 3.0, 1.5, 1.0]), np.array([1.0, 2.0, 4.0, 1.0])
    frac = rng.beta(a, b, size=(200_000, 4))
    frac[:, -1] = 1.0
    rest = np.cumprod(np.column_stack([np.ones(frac.shape[0]), 1 - frac[:, :-1]]), axis=1)
    mc = np.log(frac * rest).mean(axis=0)
    assert_allclose(mfvb.expected_log_stick(a, b), mc, atol=0.01)


@given(seed=st.integers(0, 1000))
def test_coordinate_pass_keeps_valid_state(seed):
    y, _ = dpm_simulate(5, 20, seed=seed)
    stats = mfvb.PanelStats.from_window(y)
    state = mfvb.mfvb_init(y)
    u = np.random.default_rng(seed).random(50)
    for _ in range(3):
        prev = state
        state = mfvb.mfvb_coordinate_pass(state, stats, u)
    state.check()
    # the sticks are updated first, from the responsibilities entering the pass
    assert_allclose(state.a, 1.0 + prev.rho.sum(axis=0))
    assert_allclose(state.b[:-1], 1.0 + np.cumsum(prev.rho.sum(axis=0)[::-1])[::-1][1:])


def test_fit_converges_and_is_deterministic():
    y, labels = dpm_simulate(20, 60, seed=3)
    a = mfvb.mfvb_fit(y, 50, seed=4)
    b = mfvb.mfvb_fit(y, 50, seed=4)
    assert a.converged and np.array_equal(a.vector(), b.vector())
    # every unit's most likely cluster sits at its true group mean
    best = a.rho.argmax(axis=1)
    assert_allclose(a.gamma[best], np.where(labels == 0, -0.5, 0.5), atol=0.2)


def test_fit_rejects_bad_boundary():
    with pytest.raises(ValueError):
        mfvb.mfvb_fit(np.zeros((10, 3)), 11)


def test_draws_shapes():
    y, _ = dpm_simulate(5, 30, seed=5)
    st_ = mfvb.mfvb_fit(y, 30, seed=1)
    theta, k = mfvb.mfvb_draws(st_, 7, 2)
    assert theta.shape == (7, 5, 2) and k.shape == (7, 5)
    assert np.all((k >= 0) & (k < 5))
