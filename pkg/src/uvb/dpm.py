"""Dirichlet process mixture of normals for panels of unit trajectories.

Each unit ``i`` has observations ``y_{i,t} ~ N(mu*_{k_i}, sigma2*_{k_i})``. The
unique locations ``theta*_j = (mu*_j, log sigma2*_j)``, ``j = 1..N``, get
independent bivariate normal approximations (5 parameters each: mean, then the
lower triangle of the scale factor with log diagonal). The indicators are not
given free parameters: given ``theta*`` they follow their exact sequential
(Chinese restaurant) full conditional at the first fit, and an independent
per-unit conditional built from the marginalized indicator table afterwards.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import grad, sga
from .family import as_rng, logsumexp
from .models import LOG_2PI, PanelStats

log = logging.getLogger(__name__)

PARAMS_PER_CLUSTER = 5


@dataclass(frozen=True)
class DPMConfig:
    N: int
    alpha: float = 1.0
    base_mean: tuple = (0.0, 0.0)
    base_cov: tuple = ((10.0, 0.0), (0.0, 10.0))

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("need at least one unit")
        if self.alpha <= 0:
            raise ValueError("concentration must be positive")
        cov = np.asarray(self.base_cov, dtype=float)
        if cov.shape != (2, 2) or np.any(np.linalg.eigvalsh(0.5 * (cov + cov.T)) <= 0):
            raise ValueError("base covariance must be 2x2 positive definite")

    @property
    def n_params(self) -> int:
        return PARAMS_PER_CLUSTER * self.N

    def base_logpdf(self, theta) -> np.ndarray:
        """Sum over clusters of the base log density; ``theta`` is ``(S, N, 2)``."""
        mean = np.asarray(self.base_mean, dtype=float)
        cov = np.asarray(self.base_cov, dtype=float)
        chol = np.linalg.cholesky(cov)
        diff = theta - mean
        z = np.linalg.solve(chol, diff.reshape(-1, 2).T).T.reshape(diff.shape)
        per = -LOG_2PI - np.sum(np.log(np.diag(chol))) - 0.5 * np.sum(z * z, axis=-1)
        return per.sum(axis=-1)


# ---------------------------------------------------------------------------
# Independent bivariate normal blocks, vectorised over clusters


def _blocks(lam, N):
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (PARAMS_PER_CLUSTER * N,):
        raise ValueError(f"expected {PARAMS_PER_CLUSTER * N} parameters, got {lam.shape}")
    if not np.all(np.isfinite(lam)):
        raise ValueError("non-finite auxiliary parameters")
    b = lam.reshape(N, PARAMS_PER_CLUSTER)
    return b[:, 0:2], np.exp(b[:, 2]), b[:, 3], np.exp(b[:, 4])


def pack_blocks(means, l00, l10, l11) -> np.ndarray:
    means = np.asarray(means, dtype=float)
    N = means.shape[0]
    out = np.empty((N, PARAMS_PER_CLUSTER))
    out[:, 0:2] = means
    out[:, 2] = np.log(np.broadcast_to(l00, (N,)))
    out[:, 3] = np.broadcast_to(l10, (N,))
    out[:, 4] = np.log(np.broadcast_to(l11, (N,)))
    return out.ravel()


def sample_locations(lam, N, S, rng) -> np.ndarray:
    """``(S, N, 2)`` draws of the cluster locations."""
    m, l00, l10, l11 = _blocks(lam, N)
    z = rng.standard_normal((S, N, 2))
    out = np.empty_like(z)
    out[..., 0] = m[:, 0] + l00 * z[..., 0]
    out[..., 1] = m[:, 1] + l10 * z[..., 0] + l11 * z[..., 1]
    return out


def locations_logpdf_and_score(lam, N, theta):
    """Joint log density over clusters ``(S,)`` and its score ``(S, 5N)``."""
    m, l00, l10, l11 = _blocks(lam, N)
    u0 = (theta[..., 0] - m[:, 0]) / l00
    u1 = (theta[..., 1] - m[:, 1] - l10 * u0) / l11
    logq = (-LOG_2PI - np.log(l00) - np.log(l11) - 0.5 * (u0 * u0 + u1 * u1)).sum(axis=-1)
    v1 = u1 / l11
    v0 = (u0 - l10 * v1) / l00
    score = np.empty(theta.shape[:2] + (PARAMS_PER_CLUSTER,))
    score[..., 0] = v0
    score[..., 1] = v1
    score[..., 2] = v0 * u0 * l00 - 1.0
    score[..., 3] = v1 * u0
    score[..., 4] = v1 * u1 * l11 - 1.0
    return logq, score.reshape(theta.shape[0], -1)


def locations_logpdf(lam, N, theta):
    return locations_logpdf_and_score(lam, N, np.asarray(theta, dtype=float))[0]


# ---------------------------------------------------------------------------
# Indicators


def crp_prior_prob(alpha: float, k_prev: Sequence[int]) -> np.ndarray:
    """``Pr(k_i = j | k_1..k_{i-1})`` for the existing clusters and one new one.

    Clusters are labelled ``0, 1, ...`` in order of first appearance.
    """
    k_prev = np.asarray(k_prev, dtype=int)
    i = k_prev.size
    s = int(k_prev.max()) + 1 if i else 0
    running = np.maximum.accumulate(np.concatenate([[-1], k_prev[:-1]])) if i else k_prev
    if i and (k_prev.min() < 0 or np.any(k_prev > running + 1)):
        raise ValueError("labels must be 0..s-1 in order of first appearance")
    counts = np.bincount(k_prev, minlength=s).astype(float)
    return np.append(counts, alpha) / (alpha + i)


def full_conditional_k(loglik, prior_probs) -> np.ndarray:
    """Normalised ``prior_probs * exp(loglik)`` over the candidate clusters."""
    loglik = np.asarray(loglik, dtype=float)
    with np.errstate(divide="ignore"):
        joint = loglik + np.log(np.asarray(prior_probs, dtype=float))
    if not np.any(np.isfinite(joint)) or np.any(np.isnan(joint)):
        raise ValueError("degenerate indicator conditional: no cluster has positive probability")
    p = np.exp(joint - logsumexp(joint))
    return p / p.sum()


def unit_cluster_loglik(theta, stats: PanelStats) -> np.ndarray:
    """``(S, N_units, N_clusters)`` log likelihood of each unit's data under each location."""
    mu = theta[..., 0][:, None, :]
    ls = theta[..., 1][:, None, :]
    n = stats.n[None, :, None]
    sq = stats.s2[None, :, None] - 2.0 * mu * stats.s1[None, :, None] + n * mu * mu
    return -0.5 * n * (LOG_2PI + ls) - 0.5 * sq * np.exp(-ls)


def sequential_indicators(loglik, alpha, rng, keep_probs=False):
    """Draw ``k`` unit by unit from the CRP prior times the likelihood.

    ``loglik`` is ``(S, N, N)`` (draw, unit, cluster). Returns labels ``(S, N)``,
    the per-unit log normalisers ``(S, N)`` and, optionally, the conditional
    probability vectors ``(S, N, N)``.
    """
    S, N, C = loglik.shape
    k = np.zeros((S, N), dtype=int)
    counts = np.zeros((S, C))
    used = np.zeros(S, dtype=int)
    log_z = np.empty((S, N))
    probs = np.zeros((S, N, C)) if keep_probs else None
    cols = np.arange(C)[None, :]
    rows = np.arange(S)
    u = rng.random((S, N))
    for i in range(N):
        prior = np.where(cols < used[:, None], counts, 0.0)
        prior = np.where(cols == used[:, None], alpha, prior) / (alpha + i)
        with np.errstate(divide="ignore"):
            joint = np.log(prior) + loglik[:, i, :]
        lz = logsumexp(joint, axis=1)
        p = np.exp(joint - lz[:, None])
        log_z[:, i] = lz
        j = np.minimum((np.cumsum(p, axis=1) < u[:, i][:, None] * p.sum(axis=1)[:, None]).sum(axis=1), C - 1)
        # never pick a zero-probability column through rounding
        bad = p[rows, j] <= 0
        if np.any(bad):
            j[bad] = np.argmax(p[bad], axis=1)
        k[:, i] = j
        counts[rows, j] += 1
        used += j == used
        if keep_probs:
            probs[:, i, :] = p
    return k, log_z, probs


def independent_indicators(loglik, table, rng):
    """Independent per-unit draws from ``table[i, j] * exp(loglik)``.

    Returns labels ``(S, N)`` and log normalisers ``(S, N)``.
    """
    with np.errstate(divide="ignore"):
        joint = loglik + np.log(table)[None]
    log_z = logsumexp(joint, axis=2)
    p = np.exp(joint - log_z[..., None])
    u = rng.random(log_z.shape)
    k = np.minimum((np.cumsum(p, axis=2) < u[..., None] * p.sum(axis=2)[..., None]).sum(axis=2), p.shape[2] - 1)
    return k, log_z


def cluster_weights(k_draws, n_clusters: Optional[int] = None) -> np.ndarray:
    """Share of all sampled unit labels falling in each cluster."""
    k_draws = np.asarray(k_draws, dtype=int)
    if k_draws.ndim == 1:
        k_draws = k_draws[None, :]
    C = k_draws.shape[1] if n_clusters is None else n_clusters
    return np.bincount(k_draws.ravel(), minlength=C)[:C] / k_draws.size


def marginalize_indicators(lam, config: DPMConfig, stats: PanelStats, M: int = 100, seed=None):
    """``N x N`` table of indicator probabilities averaged over ``M`` joint draws.

    Each draw takes locations from the approximation and indicators from their
    exact sequential conditional given all data summarised in ``stats``; the
    table averages those conditional probability vectors.
    """
    if M < 1:
        raise ValueError("need M >= 1")
    rng = as_rng(seed)
    theta = sample_locations(lam, config.N, M, rng)
    ll = unit_cluster_loglik(theta, stats)
    _, _, probs = sequential_indicators(ll, config.alpha, rng, keep_probs=True)
    table = probs.mean(axis=0)
    return table / table.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Targets


@dataclass
class ClusterState:
    """Fitted locations plus the indicator table they were fitted with.

    ``table`` is ``None`` for a first fit (indicators from the sequential CRP
    conditional). ``stats`` summarises the observations that the indicator
    conditional of this fit uses, and ``through`` is the last observation count
    absorbed.
    """

    lam: np.ndarray
    through: int
    stats: PanelStats
    table: Optional[np.ndarray] = None

    def digest(self) -> str:
        import hashlib

        t = b"" if self.table is None else np.ascontiguousarray(self.table).tobytes()
        return hashlib.sha256(t).hexdigest()[:16]


@dataclass
class DPMObjective:
    """Score-gradient estimator for one DPM fit.

    With ``table=None`` the target is the exact augmented posterior given the
    data in ``stats``; otherwise it is the pseudo-posterior that uses ``table``
    as the indicator prior and ``prior_lam`` as the location prior. In both
    cases the payoff collapses to ``sum_i log Z_i + log prior(theta*) - log q``
    because the indicator factors of target and approximation cancel.
    """

    config: DPMConfig
    stats: PanelStats
    table: Optional[np.ndarray] = None
    prior_lam: Optional[np.ndarray] = None
    window_length: int = 0
    S: int = 25
    loglik_evals: int = 0

    def payoff_parts(self, theta, rng):
        ll = unit_cluster_loglik(theta, self.stats)
        self.loglik_evals += theta.shape[0] * self.config.N * self.window_length
        if self.table is None:
            k, log_z, _ = sequential_indicators(ll, self.config.alpha, rng)
            prior = self.config.base_logpdf(theta)
        else:
            k, log_z = independent_indicators(ll, self.table, rng)
            prior = locations_logpdf(self.prior_lam, self.config.N, theta)
        return k, log_z.sum(axis=1) + prior

    def estimate(self, lam, rng):
        theta = sample_locations(lam, self.config.N, self.S, rng)
        logq, scores = locations_logpdf_and_score(lam, self.config.N, theta)
        _, logp = self.payoff_parts(theta, rng)
        return grad.batch_gradient(scores, logp - logq)


def dpm_target_t1(config: DPMConfig, panel) -> "callable":
    """Log joint ``log p(y, theta*, k)`` for a first fit on ``panel`` ``(T, N)``.

    Returns ``fn(theta (S,N,2), k (S,N)) -> (S,)`` combining the unit
    likelihoods, the sequential CRP probabilities of ``k`` and the base density.
    """
    panel = np.asarray(panel, dtype=float)
    if panel.ndim != 2 or panel.shape[0] < 1:
        raise ValueError("need a non-empty (T, N) panel")
    if panel.shape[1] != config.N:
        raise ValueError("panel width does not match the number of units")
    stats = PanelStats.from_window(panel)

    def fn(theta, k):
        theta = np.asarray(theta, dtype=float)
        k = np.atleast_2d(np.asarray(k, dtype=int))
        ll = unit_cluster_loglik(theta, stats)
        S, N = k.shape
        out = config.base_logpdf(theta)
        for s in range(S):
            lp = 0.0
            for i in range(N):
                p = crp_prior_prob(config.alpha, k[s, :i])
                if k[s, i] >= p.size:
                    lp = -np.inf
                    break
                lp += np.log(p[k[s, i]]) + ll[s, i, k[s, i]]
            out[s] += lp
        return out

    return fn


def dpm_update_target(state: ClusterState, window_lo: int, window_panel, config: DPMConfig):
    """Log pseudo-posterior ``fn(theta, k)`` for the window after ``state``."""
    if state.through != window_lo:
        raise ValueError(
            f"indicator table was built at {state.through}, window starts at {window_lo}"
        )
    if state.table is None:
        raise ValueError("marginalize the indicators before building an update target")
    stats = PanelStats.from_window(np.asarray(window_panel, dtype=float))

    def fn(theta, k):
        theta = np.asarray(theta, dtype=float)
        k = np.atleast_2d(np.asarray(k, dtype=int))
        ll = unit_cluster_loglik(theta, stats)
        rows = np.arange(k.shape[1])
        with np.errstate(divide="ignore"):
            terms = np.take_along_axis(ll, k[..., None], axis=2)[..., 0]
            terms = terms + np.log(state.table[rows[None, :], k])
        return terms.sum(axis=1) + locations_logpdf(state.lam, config.N, theta)

    return fn


# ---------------------------------------------------------------------------
# Runs


def greedy_partition(panel, config: DPMConfig) -> list:
    """Deterministic one-pass clustering of the units of ``panel`` ``(T, N)``.

    Unit ``i`` joins the existing cluster maximising ``log n_c`` plus its
    likelihood at the cluster's pooled estimate, or opens a new cluster scored
    by ``log alpha`` plus a Laplace approximation of its marginal likelihood
    under the base measure. Returns lists of unit indices in opening order.
    """
    y = np.asarray(panel, dtype=float)
    T, N = y.shape
    s1, s2 = y.sum(axis=0), (y * y).sum(axis=0)
    base = config.base_logpdf

    def estimate(a, b, n):
        m = a / n
        return m, np.log(max(b / n - m * m, 1e-8))

    def loglik(i, m, lv):
        return -0.5 * T * (LOG_2PI + lv) - 0.5 * (s2[i] - 2 * m * s1[i] + T * m * m) * np.exp(-lv)

    groups, sums = [], []
    for i in range(N):
        m, lv = estimate(s1[i], s2[i], T)
        # Hessian of the negative log likelihood in (mu, log sigma2) is diag(T / sigma2, T / 2)
        log_det = np.log(T * np.exp(-lv)) + np.log(T / 2.0)
        new = (np.log(config.alpha) + loglik(i, m, lv) + base(np.array([[[m, lv]]]))[0]
               + LOG_2PI - 0.5 * log_det)
        scores = [np.log(len(g)) + loglik(i, *estimate(*c)) for g, c in zip(groups, sums)] + [new]
        j = int(np.argmax(scores))
        if j == len(groups):
            groups.append([])
            sums.append([0.0, 0.0, 0])
        groups[j].append(i)
        sums[j][0] += s1[i]
        sums[j][1] += s2[i]
        sums[j][2] += T
    return groups


def init_locations(panel, config: DPMConfig) -> np.ndarray:
    """Starting auxiliary parameters from :func:`greedy_partition`.

    Occupied clusters start at the pooled mean and log variance of their units
    with Laplace-approximation scales; the spare clusters start at the base
    measure, which is their posterior when no unit uses them.
    """
    y = np.asarray(panel, dtype=float)
    N = config.N
    if y.ndim != 2 or y.shape[1] != N:
        raise ValueError("panel width does not match the number of units")
    cov = np.asarray(config.base_cov, dtype=float)
    chol = np.linalg.cholesky(cov)
    means = np.tile(np.asarray(config.base_mean, dtype=float), (N, 1))
    l00 = np.full(N, chol[0, 0])
    l10 = np.full(N, chol[1, 0])
    l11 = np.full(N, chol[1, 1])
    for j, units in enumerate(greedy_partition(y, config)):
        block = y[:, units]
        n = block.size
        var = max(block.var(), 1e-8)
        means[j] = block.mean(), np.log(var)
        l00[j], l10[j], l11[j] = np.sqrt(var / n), 0.0, np.sqrt(2.0 / n)
    return pack_blocks(means, l00, l10, l11)


@dataclass
class DPMRecord:
    boundary: int
    state: ClusterState
    wall_time: float
    iterations: int
    converged: bool
    loglik_evals: int
    window: tuple
    trace: list = field(default_factory=list, repr=False)

    def snapshot(self, config: DPMConfig, M=100, seed=0) -> dict:
        N = config.N
        m, _, _, _ = _blocks(self.state.lam, N)
        _, k = joint_draws(self.state, config, M, seed)
        w = cluster_weights(k, N)
        return {
            "boundary": self.boundary,
            "cluster": {
                "mu": m[:, 0].tolist(),
                "log_sigma2": m[:, 1].tolist(),
                "weight": w.tolist(),
            },
            "indicator_table_digest": self.state.digest(),
        }


def _fit(config, stats, window_length, lam0, S, seed, stop, rate, table=None, prior_lam=None):
    obj = DPMObjective(config, stats, table, prior_lam, window_length, S)
    return sga.run(None, lam0, obj.estimate, S, stop, seed, rate), obj


def dpm_svb_fit(panel, T_n, config: DPMConfig, S=25, seed=None, stop=sga.StopRule(), rate=0.01):
    """First-fit (exact augmented posterior) on observations ``1..T_n``."""
    panel = np.asarray(panel, dtype=float)
    if T_n < 1 or T_n > panel.shape[0]:
        raise ValueError(f"T_n={T_n} outside panel of length {panel.shape[0]}")
    start = time.perf_counter()
    block = panel[:T_n]
    stats = PanelStats.from_window(block)
    lam0 = init_locations(block, config)
    result, obj = _fit(config, stats, T_n, lam0, S, as_rng(seed), stop, rate)
    state = ClusterState(result.lam, T_n, stats, None)
    return DPMRecord(T_n, state, time.perf_counter() - start, result.iterations,
                     result.converged, obj.loglik_evals, (0, T_n), result.trace)


def dpm_uvb_run(panel, schedule, config: DPMConfig, S=25, seed=None, stop=sga.StopRule(), rate=0.01, M=100):
    """First fit at ``T_1``, then one update per later boundary."""
    from .engines import UpdateSchedule, update_rng

    panel = np.asarray(panel, dtype=float)
    sched = schedule if isinstance(schedule, UpdateSchedule) else UpdateSchedule(schedule)
    sched.check(panel.shape[0])
    windows = sched.windows()
    records = [dpm_svb_fit(panel, windows[0][1], config, S, seed, stop, rate)]
    cumulative = records[0].state.stats
    for n, (lo, hi) in enumerate(windows[1:], start=1):
        start = time.perf_counter()
        rng = update_rng(seed, n)
        prev = records[-1].state
        table = marginalize_indicators(prev.lam, config, cumulative, M, rng)
        block = panel[lo:hi]
        stats = PanelStats.from_window(block)
        cumulative = cumulative + stats
        result, obj = _fit(config, stats, hi - lo, prev.lam, S, rng, stop, rate, table, prev.lam)
        state = ClusterState(result.lam, hi, stats, table)
        records.append(DPMRecord(hi, state, time.perf_counter() - start, result.iterations,
                                 result.converged, obj.loglik_evals, (lo, hi), result.trace))
    return records


def dpm_svb_run(panel, schedule, config: DPMConfig, S=25, seed=None, stop=sga.StopRule(), rate=0.01):
    from .engines import UpdateSchedule, update_rng

    sched = schedule if isinstance(schedule, UpdateSchedule) else UpdateSchedule(schedule)
    sched.check(np.asarray(panel).shape[0])
    return [dpm_svb_fit(panel, T, config, S, update_rng(seed, n), stop, rate)
            for n, T in enumerate(sched.boundaries)]


# ---------------------------------------------------------------------------
# Predictives


def joint_draws(state: ClusterState, config: DPMConfig, M: int = 100, seed=None):
    """``M`` joint draws ``(theta* (M,N,2), k (M,N))`` from a fitted state."""
    rng = as_rng(seed)
    theta = sample_locations(state.lam, config.N, M, rng)
    ll = unit_cluster_loglik(theta, state.stats)
    if state.table is None:
        k, _, _ = sequential_indicators(ll, config.alpha, rng)
    else:
        k, _ = independent_indicators(ll, state.table, rng)
    return theta, k


def dpm_predictive_logscore(theta, k, unit: int, y_observed) -> np.ndarray:
    """Log of the draw-averaged normal density of unit ``unit`` at each value in ``y_observed``."""
    theta = np.asarray(theta, dtype=float)
    k = np.asarray(k, dtype=int)
    loc = theta[np.arange(theta.shape[0]), k[:, unit]]
    y = np.atleast_1d(np.asarray(y_observed, dtype=float))
    logd = -0.5 * (LOG_2PI + loc[:, 1][:, None] + (y[None, :] - loc[:, 0][:, None]) ** 2 * np.exp(-loc[:, 1])[:, None])
    out = logsumexp(logd, axis=0) - np.log(theta.shape[0])
    if not np.all(np.isfinite(out)):
        import warnings

        warnings.warn("predictive density is zero at an observed value", RuntimeWarning)
    return out


def dpm_simulate(N, T, groups=((-0.5, 0.05), (0.5, 0.2)), seed=None, probs=None):
    """Panel ``(T, N)`` whose units each follow one of ``groups`` (mean, variance)."""
    rng = as_rng(seed)
    groups = np.asarray(groups, dtype=float)
    G = groups.shape[0]
    probs = np.full(G, 1.0 / G) if probs is None else np.asarray(probs, dtype=float)
    labels = rng.choice(G, size=N, p=probs)
    y = groups[labels, 0][None, :] + np.sqrt(groups[labels, 1])[None, :] * rng.standard_normal((T, N))
    return y, labels
