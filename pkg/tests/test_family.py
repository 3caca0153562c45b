import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from uvb import family
from uvb.family import FamilySpec, InvalidParameterError


def random_lambda(spec, seed):
    rng = np.random.default_rng(seed)
    return 0.5 * rng.standard_normal(spec.n_params)


def brute_log_density(spec, lam, theta):
    # independent route: scipy densities of each component, mixed by hand
    means, factors, logw = family.unpack(spec, lam)
    dens = sum(
        np.exp(logw[k]) * stats.multivariate_normal(means[k], factors[k] @ factors[k].T).pdf(theta)
        for k in range(spec.components)
    )
    return np.log(dens)


@pytest.mark.parametrize("d,K", [(1, 1), (2, 1), (3, 2), (4, 3)])
def test_log_density_matches_scipy(d, K):
    spec = FamilySpec(d, K)
    lam = random_lambda(spec, d * 10 + K)
    theta = np.random.default_rng(1).standard_normal((7, d))
    assert_allclose(family.log_density(spec, lam, theta), brute_log_density(spec, lam, theta), rtol=1e-10)


@pytest.mark.parametrize("d,K", [(1, 1), (2, 2), (3, 3)])
def test_score_matches_finite_differences(d, K):
    spec = FamilySpec(d, K)
    lam = random_lambda(spec, 3)
    theta = np.random.default_rng(2).standard_normal(d)
    _, g = family.log_density_and_score(spec, lam, theta)
    h = 1e-6
    fd = np.array([
        (family.log_density(spec, lam + h * e, theta) - family.log_density(spec, lam - h * e, theta)) / (2 * h)
        for e in np.eye(spec.n_params)
    ])
    assert_allclose(g, fd, atol=1e-6)


@given(d=st.integers(1, 4), K=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_pack_unpack_round_trip(d, K, seed):
    spec = FamilySpec(d, K)
    lam = random_lambda(spec, seed)
    means, factors, logw = family.unpack(spec, lam)
    back = family.pack(spec, means, factors, np.exp(logw))
    # logits are only identified up to a constant
    assert_allclose(family.unpack(spec, back)[0], means)
    assert_allclose(family.unpack(spec, back)[1], factors)
    assert_allclose(family.unpack(spec, back)[2], logw, atol=1e-12)


@given(d=st.integers(1, 3), K=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_score_has_mean_zero(d, K, seed):
    spec = FamilySpec(d, K)
    lam = random_lambda(spec, seed)
    batch = family.sample(spec, lam, 20000, seed)
    g = family.score(spec, lam, batch.draws)
    se = g.std(axis=0) / np.sqrt(g.shape[0])
    assert np.all(np.abs(g.mean(axis=0)) < 6 * se + 1e-9)


def test_sample_moments_and_log_q(rng):
    spec = FamilySpec(2, 2)
    lam = random_lambda(spec, 4)
    batch = family.sample(spec, lam, 200_000, 9)
    mean, cov = family.moments(spec, lam)
    assert_allclose(batch.draws.mean(axis=0), mean, atol=0.02)
    assert_allclose(np.cov(batch.draws.T), cov, atol=0.03)
    assert_allclose(batch.log_q[:10], family.log_density(spec, lam, batch.draws[:10]))


def test_sample_is_reproducible():
    spec = FamilySpec(3, 2)
    lam = random_lambda(spec, 5)
    a, b = family.sample(spec, lam, 50, 11), family.sample(spec, lam, 50, 11)
    assert np.array_equal(a.draws, b.draws)


def test_conditional_slice_matches_gaussian_formula():
    spec = FamilySpec(3, 1)
    lam = random_lambda(spec, 6)
    mean, cov = family.moments(spec, lam)
    sub, sub_lam = family.conditional_slice(spec, lam, [0, 2], [0.3, -0.4])
    cm, cc = family.moments(sub, sub_lam)
    g = cov[1, [0, 2]] @ np.linalg.inv(cov[np.ix_([0, 2], [0, 2])])
    assert_allclose(cm, mean[1] + g @ (np.array([0.3, -0.4]) - mean[[0, 2]]))
    assert_allclose(cc, cov[1, 1] - g @ cov[[0, 2], 1])


def test_dumps_loads_exact():
    spec = FamilySpec(2, 3)
    lam = random_lambda(spec, 7)
    spec2, lam2 = family.loads(family.dumps(spec, lam))
    assert spec2 == spec and np.array_equal(lam2, lam)


@pytest.mark.parametrize("bad", [np.zeros(3), np.full(6, np.nan)])
def test_invalid_lambda_rejected(bad):
    with pytest.raises(InvalidParameterError):
        family.unpack(FamilySpec(2, 1), bad)


def test_pack_rejects_non_positive_diagonal():
    with pytest.raises(InvalidParameterError):
        family.pack(FamilySpec(1, 1), [0.0], [[0.0]])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_logsumexp_matches_scipy(xs):
    from scipy.special import logsumexp

    assert_allclose(family.logsumexp(np.array(xs)), logsumexp(xs), rtol=1e-12, atol=1e-14)
