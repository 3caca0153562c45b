import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose
from scipy import stats
from scipy.special import logsumexp

from uvb import dpm, sga
from uvb.models import PanelStats


def restricted_growth(N):
    """All label vectors in first-appearance order."""
    for k in itertools.product(range(N), repeat=N):
        if all(k[i] <= max(k[:i], default=-1) + 1 for i in range(N)):
            yield k


def test_crp_prior_example():
    assert_allclose(dpm.crp_prior_prob(1.0, [0, 0, 1]), [2 / 4, 1 / 4, 1 / 4])
    assert_allclose(dpm.crp_prior_prob(2.0, []), [1.0])


@given(st.lists(st.integers(0, 4), max_size=12), st.floats(0.1, 10.0))
def test_crp_prior_is_distribution(raw, alpha):
    # relabel into first-appearance order
    seen = {}
    k = [seen.setdefault(x, len(seen)) for x in raw]
    p = dpm.crp_prior_prob(alpha, k)
    assert p.size == len(seen) + 1
    assert_allclose(p.sum(), 1.0)


def test_crp_rejects_unordered_labels():
    with pytest.raises(ValueError):
        dpm.crp_prior_prob(1.0, [1, 0])


def test_full_conditional_degenerate():
    with pytest.raises(ValueError):
        dpm.full_conditional_k([-np.inf, -np.inf], [0.5, 0.5])
    assert_allclose(dpm.full_conditional_k([0.0, np.log(3.0)], [0.5, 0.5]), [0.25, 0.75])


def test_sequential_log_z_is_unbiased_for_marginal_likelihood():
    N, alpha = 3, 0.7
    cfg = dpm.DPMConfig(N, alpha)
    rng = np.random.default_rng(0)
    panel = rng.normal(0, 1, (4, N))
    theta = rng.normal(0, 0.7, (1, N, 2))
    # oracle: enumerate every partition through the explicit CRP loop
    fn = dpm.dpm_target_t1(cfg, panel)
    ks = np.array(list(restricted_growth(N)))
    logs = fn(np.repeat(theta, len(ks), axis=0), ks) - cfg.base_logpdf(theta)[0]
    exact = logsumexp(logs)
    ll = dpm.unit_cluster_loglik(np.repeat(theta, 20000, axis=0), PanelStats.from_window(panel))
    _, log_z, _ = dpm.sequential_indicators(ll, alpha, np.random.default_rng(1))
    est = np.exp(log_z.sum(axis=1) - exact)
    assert abs(est.mean() - 1.0) < 4 * est.std() / np.sqrt(est.size)


@given(seed=st.integers(0, 10_000))
def test_sequential_labels_in_first_appearance_order(seed):
    rng = np.random.default_rng(seed)
    ll = rng.normal(0, 3, (5, 6, 6))
    k, _, probs = dpm.sequential_indicators(ll, 1.0, rng, keep_probs=True)
    for row in k:
        assert all(row[i] <= max(row[:i], default=-1) + 1 for i in range(row.size))
    assert_allclose(probs.sum(axis=2), 1.0)


def test_independent_indicators_log_z(rng):
    ll = rng.normal(0, 2, (4, 3, 3))
    table = rng.dirichlet(np.ones(3), size=3)
    _, log_z = dpm.independent_indicators(ll, table, rng)
    assert_allclose(log_z, logsumexp(ll + np.log(table)[None], axis=2))


def test_cluster_weights_sum_to_one():
    w = dpm.cluster_weights(np.array([[0, 0, 1], [0, 2, 2]]), 3)
    assert_allclose(w, [3 / 6, 1 / 6, 2 / 6])


def test_locations_score_matches_finite_differences(rng):
    N = 2
    lam = rng.normal(0, 0.3, 5 * N)
    theta = rng.normal(0, 1, (1, N, 2))
    _, g = dpm.locations_logpdf_and_score(lam, N, theta)
    h = 1e-6
    fd = [(dpm.locations_logpdf(lam + h * e, N, theta) - dpm.locations_logpdf(lam - h * e, N, theta))[0] / (2 * h)
          for e in np.eye(lam.size)]
    assert_allclose(g[0], fd, atol=1e-6)


def test_locations_logpdf_matches_scipy(rng):
    lam = dpm.pack_blocks(np.array([[0.2, -0.1]]), 0.5, 0.3, 0.8)
    theta = np.array([[[0.4, 0.1]]])
    L = np.array([[0.5, 0.0], [0.3, 0.8]])
    want = stats.multivariate_normal([0.2, -0.1], L @ L.T).logpdf([0.4, 0.1])
    assert_allclose(dpm.locations_logpdf(lam, 1, theta)[0], want)


def test_marginalized_table_rows_are_distributions():
    cfg = dpm.DPMConfig(4)
    panel = np.random.default_rng(2).normal(0, 1, (10, 4))
    table = dpm.marginalize_indicators(dpm.init_locations(panel, cfg), cfg, PanelStats.from_window(panel), 20, 3)
    assert table.shape == (4, 4)
    assert_allclose(table.sum(axis=1), 1.0)


def test_stale_update_target_rejected():
    cfg = dpm.DPMConfig(2)
    state = dpm.ClusterState(np.zeros(10), 20, None, np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        dpm.dpm_update_target(state, 25, np.zeros((5, 2)), cfg)
    fn = dpm.dpm_update_target(state, 20, np.zeros((5, 2)), cfg)
    assert np.isfinite(fn(np.zeros((1, 2, 2)), np.array([[0, 1]]))).all()


def test_predictive_single_draw():
    theta = np.array([[[0.3, np.log(0.5)], [1.0, 0.0]]])
    k = np.array([[1, 0]])
    out = dpm.dpm_predictive_logscore(theta, k, 1, [0.1, 0.2])
    assert_allclose(out, stats.norm(0.3, np.sqrt(0.5)).logpdf([0.1, 0.2]))


def test_simulated_groups():
    y, labels = dpm.dpm_simulate(200, 400, seed=0)
    means = y.mean(axis=0)
    assert_allclose(means[labels == 0].mean(), -0.5, atol=0.02)
    assert_allclose(y[:, labels == 1].var(axis=0).mean(), 0.2, atol=0.02)


def test_small_uvb_run_is_reproducible():
    y, _ = dpm.dpm_simulate(6, 40, seed=1)
    cfg = dpm.DPMConfig(6)
    stop = sga.StopRule(max_iterations=200)
    a = dpm.dpm_uvb_run(y, (20, 30), cfg, 10, 4, stop, M=10)
    b = dpm.dpm_uvb_run(y, (20, 30), cfg, 10, 4, stop, M=10)
    assert [r.boundary for r in a] == [20, 30]
    assert a[1].state.table is not None and a[0].state.table is None
    assert np.array_equal(a[1].state.lam, b[1].state.lam)
    snap = a[1].snapshot(cfg, 10, 0)
    assert set(snap) == {"boundary", "cluster", "indicator_table_digest"}
    assert_allclose(sum(snap["cluster"]["weight"]), 1.0)


def test_greedy_partition_recovers_separated_groups():
    cfg = dpm.DPMConfig(20)
    panel, labels = dpm.dpm_simulate(20, 40, groups=((-3.0, 0.1), (3.0, 0.1)), seed=4)
    groups = dpm.greedy_partition(panel, cfg)
    assert len(groups) == 2
    for g in groups:
        assert len(set(labels[g])) == 1
    assert sorted(i for g in groups for i in g) == list(range(20))


def test_init_puts_spare_clusters_at_base_measure():
    cfg = dpm.DPMConfig(6)
    panel, _ = dpm.dpm_simulate(6, 30, groups=((-3.0, 0.1), (3.0, 0.1)), seed=5)
    lam = dpm.init_locations(panel, cfg)
    theta = np.random.default_rng(0).normal(size=(3, 6, 2))
    spare = lam.reshape(6, 5)[2:].ravel()
    want = stats.multivariate_normal(cfg.base_mean, cfg.base_cov).logpdf(theta[:, 2:].reshape(-1, 2)).reshape(3, 4).sum(1)
    assert_allclose(dpm.locations_logpdf(spare, 4, theta[:, 2:]), want)
