"""Model families: priors, windowed likelihoods, simulators and predictives.

Parameter batches are ``(S, d)`` arrays; likelihoods return one value per row.
Series are 1-D arrays indexed by time, panels are time-major ``(T, N)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import betaln, gammaln

from . import family
from .family import FamilySpec, as_rng, logsumexp
from .target import DataWindow, TargetDensity

LOG_2PI = np.log(2.0 * np.pi)


def normal_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def _batch(theta, dim):
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if theta.shape[1] != dim:
        raise ValueError(f"expected parameter dimension {dim}, got {theta.shape[1]}")
    return theta


class Model:
    """Interface used by the SVB/UVB engines.

    ``summary`` is an optional running statistic that the engine folds each
    window into exactly once (see :meth:`absorb`); ``context`` is whatever
    :meth:`log_lik` needs beyond the window, rebuilt between updates from draws
    of the latest approximation.
    """

    name = "model"
    dim: int
    lags = 0
    context_draws = 0

    def log_prior(self, theta) -> np.ndarray:
        raise NotImplementedError

    def log_lik(self, theta, window: DataWindow, context=None) -> np.ndarray:
        raise NotImplementedError

    def init_lambda(self, spec: FamilySpec, window: DataWindow, rng) -> np.ndarray:
        return family.initial_lambda(spec, rng=rng)

    def absorb(self, summary, window: DataWindow):
        return None

    def prior_context(self, summary):
        """Context for a fit that targets the exact posterior."""
        return None

    def update_context(self, draws, summary):
        """Context for the next update, from draws of the current approximation."""
        return None


class NormalMeanModel(Model):
    """``y_t ~ N(theta, noise_var)`` with a ``N(prior_mean, prior_var)`` prior."""

    name = "normal"
    dim = 1

    def __init__(self, prior_mean=0.0, prior_var=10.0, noise_var=1.0):
        self.prior_mean = float(prior_mean)
        self.prior_var = float(prior_var)
        self.noise_var = float(noise_var)

    def log_prior(self, theta):
        theta = _batch(theta, 1)
        return normal_logpdf(theta[:, 0], self.prior_mean, self.prior_var)

    def log_lik(self, theta, window, context=None):
        theta = _batch(theta, 1)
        y = np.asarray(window.observations, dtype=float).ravel()
        resid = y[None, :] - theta[:, [0]]
        return -0.5 * y.size * (LOG_2PI + np.log(self.noise_var)) - 0.5 * np.sum(
            resid**2, axis=1
        ) / self.noise_var

    def posterior(self, y):
        """Exact posterior mean and variance given all of ``y``."""
        y = np.asarray(y, dtype=float).ravel()
        prec = 1.0 / self.prior_var + y.size / self.noise_var
        mean = (self.prior_mean / self.prior_var + y.sum() / self.noise_var) / prec
        return mean, 1.0 / prec

    def init_lambda(self, spec, window, rng):
        y = np.asarray(window.observations, dtype=float).ravel()
        sd = np.sqrt(self.noise_var / y.size)
        return family.initial_lambda(spec, mean=[y.mean()], scale=2 * sd, rng=rng)


# ---------------------------------------------------------------------------
# AR(3)


@dataclass(frozen=True)
class AR3Params:
    mu: float
    phi: np.ndarray
    sigma2: float

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[self.mu], self.phi, [np.log(self.sigma2)]])


def ar3_is_stationary(phi) -> bool:
    phi = np.asarray(phi, dtype=float)
    companion = np.zeros((3, 3))
    companion[0] = phi
    companion[1, 0] = companion[2, 1] = 1.0
    return bool(np.all(np.abs(np.linalg.eigvals(companion)) < 1.0))


def ar3_draw_params(seed=None) -> AR3Params:
    """Level and coefficients from N(0, 1) (coefficients rejected until
    stationary); precision from Gamma(shape 5, rate 5)."""
    rng = as_rng(seed)
    mu = rng.standard_normal()
    while True:
        phi = rng.standard_normal(3)
        if ar3_is_stationary(phi):
            break
    precision = rng.gamma(5.0, 1.0 / 5.0)
    return AR3Params(float(mu), phi, float(1.0 / precision))


def ar3_simulate(params: AR3Params, T: int, seed=None, burn_in: int = 50) -> np.ndarray:
    if T < 4:
        raise ValueError("need T >= 4")
    rng = as_rng(seed)
    n = T + burn_in
    y = np.full(n + 3, params.mu)
    sd = np.sqrt(params.sigma2)
    e = sd * rng.standard_normal(n)
    phi = np.asarray(params.phi, dtype=float)
    for t in range(3, n + 3):
        y[t] = params.mu + phi @ (y[t - 3 : t][::-1] - params.mu) + e[t - 3]
    return y[3 + burn_in :]


def _ar3_design(window: DataWindow):
    """Targets and lag matrix for the terms of ``window`` with three lags available."""
    obs = np.asarray(window.observations, dtype=float).ravel()
    hist = np.zeros(0) if window.history is None else np.asarray(window.history, float).ravel()
    start_index = window.lo - hist.size
    if window.lo >= 3 and hist.size < 3:
        raise ValueError(f"window ({window.lo}, {window.hi}] needs 3 lagged observations")
    full = np.concatenate([hist, obs])
    first = max(3 - start_index, hist.size)
    idx = np.arange(first, full.size)
    X = np.stack([full[idx - 1], full[idx - 2], full[idx - 3]], axis=1)
    return full[idx], X


class AR3Model(Model):
    """``y_t = mu + sum_k phi_k (y_{t-k} - mu) + e_t``, ``theta = (mu, phi_1..3, log sigma^2)``.

    Inference conditions on the first three observations.
    """

    name = "ar3"
    dim = 5
    lags = 3

    def __init__(self, prior_var=10.0):
        self.prior_var = float(prior_var)

    def log_prior(self, theta):
        theta = _batch(theta, 5)
        return np.sum(normal_logpdf(theta, 0.0, self.prior_var), axis=1)

    def log_lik(self, theta, window, context=None):
        theta = _batch(theta, 5)
        y, X = _ar3_design(window)
        if y.size == 0:
            return np.zeros(theta.shape[0])
        mu, phi, ls = theta[:, 0], theta[:, 1:4], theta[:, 4]
        pred = (mu * (1.0 - phi.sum(axis=1)))[:, None] + phi @ X.T
        sq = np.sum((y[None, :] - pred) ** 2, axis=1)
        return -0.5 * y.size * (LOG_2PI + ls) - 0.5 * sq * np.exp(-ls)

    def init_lambda(self, spec, window, rng):
        # level and variance from sample moments, no autocorrelation, broad scale
        y = np.asarray(window.observations, dtype=float).ravel()
        mean = np.array([y.mean(), 0.0, 0.0, 0.0, np.log(y.var())])
        return family.initial_lambda(spec, mean=mean, scale=0.1, spread=1.0, rng=rng)


def ar3_predictive_logscore(draws, history, y_next) -> float:
    """Log of the draw-averaged one-step-ahead density at ``y_next``."""
    draws = _batch(draws, 5)
    lags = np.asarray(history, dtype=float).ravel()[-3:][::-1]
    if lags.size < 3:
        raise ValueError("need the last 3 observations")
    mu, phi = draws[:, 0], draws[:, 1:4]
    mean = mu + (phi * (lags[None, :] - mu[:, None])).sum(axis=1)
    logd = normal_logpdf(float(y_next), mean, np.exp(draws[:, 4]))
    return draw_average(logd)


def draw_average(logd) -> float:
    """``log(mean(exp(logd)))``, warning when every density underflows."""
    logd = np.asarray(logd, dtype=float)
    out = float(logsumexp(logd) - np.log(logd.size))
    if not np.isfinite(out):
        warnings.warn("predictive density is zero at the observed value", RuntimeWarning)
    return out


# ---------------------------------------------------------------------------
# Two-component mixture panel


def mixture_simulate(N: int, T: int, seed=None, pi: float = 0.5):
    """Panel ``(T, N)`` and labels ``k`` (0/1) with ``Pr(k_i = 1) = pi``.

    Component means are N(0, 0.25) and variances U(1, 2).
    """
    if N < 1 or T < 1:
        raise ValueError("need N, T >= 1")
    rng = as_rng(seed)
    mu = rng.normal(0.0, 0.5, size=2)
    sigma2 = rng.uniform(1.0, 2.0, size=2)
    k = (rng.random(N) < pi).astype(int)
    y = mu[k][None, :] + np.sqrt(sigma2[k])[None, :] * rng.standard_normal((T, N))
    return y, k


def initial_class_probs(N: int, alpha: float = 1.0, beta: float = 1.0) -> np.ndarray:
    """``Pr(k_i = j) = B(j + alpha, beta - j + 1) / B(alpha, beta)`` for j = 0, 1."""
    logp = np.array([betaln(j + alpha, beta - j + 1) - betaln(alpha, beta) for j in (0, 1)])
    return np.tile(np.exp(logp), (N, 1))


@dataclass(frozen=True)
class PanelStats:
    """Per-unit counts, sums and sums of squares."""

    n: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    @classmethod
    def from_window(cls, window) -> "PanelStats":
        y = np.asarray(getattr(window, "observations", window), dtype=float)
        return cls(np.full(y.shape[1], y.shape[0], dtype=float), y.sum(0), (y * y).sum(0))

    def __add__(self, other: "PanelStats") -> "PanelStats":
        return PanelStats(self.n + other.n, self.s1 + other.s1, self.s2 + other.s2)


def _unpack_mixture(theta):
    theta = _batch(theta, 4)
    return theta[:, 0:2], theta[:, 2:4]


def mixture_unit_loglik(theta, window: DataWindow) -> np.ndarray:
    """``(S, N, 2)`` window log likelihood of each unit under each class.

    Evaluated observation by observation, so the cost grows with the window.
    """
    ls, mu = _unpack_mixture(theta)
    y = np.asarray(window.observations, dtype=float)
    L = y.shape[0]
    out = np.empty((ls.shape[0], y.shape[1], 2))
    for j in (0, 1):
        r = y[None, :, :] - mu[:, j][:, None, None]
        out[:, :, j] = -0.5 * L * (LOG_2PI + ls[:, j])[:, None] - 0.5 * np.sum(r * r, axis=1) * np.exp(
            -ls[:, j]
        )[:, None]
    return out


def mixture_stats_loglik(theta, stats: PanelStats) -> np.ndarray:
    """Same quantity as :func:`mixture_unit_loglik` from sufficient statistics."""
    ls, mu = _unpack_mixture(theta)
    out = np.empty((ls.shape[0], stats.n.size, 2))
    for j in (0, 1):
        m = mu[:, j][:, None]
        sq = stats.s2[None, :] - 2 * m * stats.s1[None, :] + stats.n[None, :] * m * m
        out[:, :, j] = -0.5 * stats.n[None, :] * (LOG_2PI + ls[:, j])[:, None] - 0.5 * sq * np.exp(
            -ls[:, j]
        )[:, None]
    return out


def _check_probs(probs):
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ValueError("class probabilities must be N x 2")
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("class probability rows must sum to 1")
    return probs


def mixture_marginal_loglik(theta, window, probs) -> np.ndarray:
    """``sum_i log sum_j p(y_i window | theta, k_i = j) probs[i, j]`` per draw."""
    probs = _check_probs(probs)
    ll = mixture_unit_loglik(theta, window)
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return np.sum(logsumexp(ll + logp[None], axis=2), axis=1)


def mixture_class_probs(draws, data, prior_probs) -> np.ndarray:
    """Draw-averaged class probabilities for each unit (rows sum to 1).

    ``data`` is a :class:`DataWindow`, a ``(T, N)`` array or :class:`PanelStats`.
    """
    prior_probs = _check_probs(prior_probs)
    stats = data if isinstance(data, PanelStats) else PanelStats.from_window(data)
    ll = mixture_stats_loglik(draws, stats)
    M = ll.shape[0]
    avg = logsumexp(ll, axis=0) - np.log(M)
    with np.errstate(divide="ignore"):
        joint = avg + np.log(prior_probs)
    out = np.exp(joint - logsumexp(joint, axis=1)[:, None])
    return out / out.sum(axis=1, keepdims=True)


def classification_accuracy(estimated, truth) -> float:
    estimated = np.asarray(estimated)
    truth = np.asarray(truth)
    if estimated.shape != truth.shape:
        raise ValueError("label vectors differ in length")
    agree = float(np.mean(estimated == truth))
    return max(agree, 1.0 - agree)


class MixtureModel(Model):
    """Two-class normal mixture panel with the mixing weight integrated out.

    ``theta = (log sigma_0^2, log sigma_1^2, mu_0, mu_1)``. The context is the
    ``N x 2`` table of class probabilities that multiplies each unit's window
    likelihood.
    """

    name = "mixture"
    dim = 4

    def __init__(self, N, alpha=1.0, beta=1.0, prior_var=10.0, context_draws=100):
        self.N = int(N)
        self.alpha, self.beta = float(alpha), float(beta)
        self.prior_var = float(prior_var)
        self.context_draws = int(context_draws)

    def log_prior(self, theta):
        theta = _batch(theta, 4)
        return np.sum(normal_logpdf(theta, 0.0, self.prior_var), axis=1)

    def log_lik(self, theta, window, context=None):
        probs = self.prior_context(None) if context is None else context
        return mixture_marginal_loglik(theta, window, probs)

    def absorb(self, summary, window):
        stats = PanelStats.from_window(window)
        return stats if summary is None else summary + stats

    def prior_context(self, summary):
        return initial_class_probs(self.N, self.alpha, self.beta)

    def update_context(self, draws, summary):
        return mixture_class_probs(draws, summary, self.prior_context(summary))

    def init_lambda(self, spec, window, rng):
        # split units at the median of their sample means
        y = np.asarray(window.observations, dtype=float)
        means = y.mean(axis=0)
        cut = np.median(means)
        lo, hi = means[means <= cut], means[means > cut]
        hi = hi if hi.size else lo
        pooled = np.log(np.mean(y.var(axis=0)) + 1e-12)
        centre = np.array([pooled, pooled, lo.mean(), hi.mean()])
        return family.initial_lambda(spec, mean=centre, scale=0.1, spread=1.0, rng=rng)


# ---------------------------------------------------------------------------
# Hierarchical schools model, coordinates (mu, log tau, theta_1..theta_n)

SCHOOLS_NU = 4.0


def t_logpdf(x, nu):
    return (
        gammaln((nu + 1) / 2)
        - gammaln(nu / 2)
        - 0.5 * np.log(nu * np.pi)
        - (nu + 1) / 2 * np.log1p(x * x / nu)
    )


def school_terms(theta_j, mu, log_tau, y, sigma, nu=SCHOOLS_NU):
    """``log N(y; theta_j, sigma^2) + log t_nu((theta_j - mu)/tau) - log tau``."""
    tau = np.exp(log_tau)
    return normal_logpdf(y, theta_j, sigma**2) + t_logpdf((theta_j - mu) / tau, nu) - log_tau


def schools_log_posterior(theta, y, sigma, nu=SCHOOLS_NU) -> np.ndarray:
    """Exact log posterior (up to a constant) for the schools in ``y``.

    The flat prior on ``(mu, tau)`` picks up the ``+log tau`` Jacobian because
    the approximation works on ``log tau``.
    """
    y = np.asarray(y, dtype=float).ravel()
    sigma = np.asarray(sigma, dtype=float).ravel()
    if np.any(sigma <= 0):
        raise ValueError("school standard errors must be positive")
    theta = _batch(theta, 2 + y.size)
    mu, log_tau, th = theta[:, 0], theta[:, 1], theta[:, 2:]
    terms = school_terms(th, mu[:, None], log_tau[:, None], y[None, :], sigma[None, :], nu)
    return np.sum(terms, axis=1) + log_tau


@dataclass(frozen=True)
class SchoolsHyperprior:
    """Independent normal prior on ``(mu, log tau)``.

    The flat prior leaves the posterior improper until three schools are
    observed, so a fit to fewer schools needs this in place of it.
    """

    mu_sd: float = 100.0
    log_tau_mean: float = 0.0
    log_tau_sd: float = 3.0

    def logpdf(self, mu, log_tau):
        return normal_logpdf(mu, 0.0, self.mu_sd**2) + normal_logpdf(
            log_tau, self.log_tau_mean, self.log_tau_sd**2
        )


def schools_noncentred_log_posterior(x, y, sigma, nu=SCHOOLS_NU) -> np.ndarray:
    """Flat-prior posterior in ``(mu, log tau, eta)`` with ``theta = mu + tau * eta``.

    Equal to :func:`schools_log_posterior` plus the log Jacobian ``n log tau``.
    """
    y = np.asarray(y, dtype=float).ravel()
    sigma = np.asarray(sigma, dtype=float).ravel()
    x = _batch(x, 2 + y.size)
    mu, log_tau, eta = x[:, 0], x[:, 1], x[:, 2:]
    theta = mu[:, None] + np.exp(log_tau)[:, None] * eta
    lik = normal_logpdf(y[None, :], theta, sigma[None, :] ** 2)
    return np.sum(lik + t_logpdf(eta, nu), axis=1) + log_tau


def schools_target(n_observed, y, sigma, prev=None, nu=SCHOOLS_NU, hyperprior=None) -> TargetDensity:
    """Target over ``(mu, log tau, theta_1..theta_n)`` for the first ``n`` schools.

    Without ``prev`` this is the exact posterior, under the flat prior on
    ``(mu, tau)`` or, if given, ``hyperprior`` on ``(mu, log tau)`` (which
    replaces the flat prior and its Jacobian). With ``prev = (spec, lam)``
    over the first ``n - 1`` schools it is the pseudo-posterior that appends
    school ``n`` to the previous approximation.
    """
    y = np.asarray(y, dtype=float).ravel()[:n_observed]
    sigma = np.asarray(sigma, dtype=float).ravel()[:n_observed]
    if y.size != n_observed:
        raise ValueError("not enough schools for n_observed")
    d = 2 + n_observed
    if prev is None and hyperprior is None:
        return TargetDensity(lambda th: schools_log_posterior(_batch(th, d), y, sigma, nu),
                             label=f"schools posterior n={n_observed}")
    if prev is None:

        def proper(th):
            th = _batch(th, d)
            flat = schools_log_posterior(th, y, sigma, nu) - th[:, 1]
            return flat + hyperprior.logpdf(th[:, 0], th[:, 1])

        return TargetDensity(proper, label=f"schools posterior n={n_observed} (proper hyperprior)")
    pspec, plam = prev
    if pspec.dim != d - 1:
        raise ValueError(f"previous approximation has dimension {pspec.dim}, expected {d - 1}")

    def fn(th):
        th = _batch(th, d)
        new = school_terms(th[:, -1], th[:, 0], th[:, 1], y[-1], sigma[-1], nu)
        return new + family.log_density(pspec, plam, th[:, :-1])

    return TargetDensity(fn, label=f"schools pseudo-posterior n={n_observed}")


def schools_init_lambda(y, sigma, n):
    """Cold start for a fit to the first ``n`` schools."""
    y = np.asarray(y, dtype=float).ravel()[:n]
    spread = np.std(y) if n > 1 else float(np.asarray(sigma, dtype=float).ravel()[0])
    mean = np.concatenate([[y.mean(), np.log(spread + 1.0)], y])
    scale = np.concatenate([[5.0, 0.5], np.full(n, 5.0)])
    spec = FamilySpec(2 + n, 1)
    return spec, family.initial_lambda(spec, mean=mean, scale=scale)


def schools_grow_lambda(spec: FamilySpec, lam):
    """Append a school to a single-normal approximation.

    The new effect starts at the mean of ``mu`` and shares ``mu``'s row of the
    scale factor, plus its own scale ``exp(E[log tau])``.
    """
    if spec.components != 1:
        raise ValueError("schools approximations are single normals")
    means, factors, _ = family.unpack(spec, lam)
    d = spec.dim
    new_spec = FamilySpec(d + 1, 1)
    m = np.append(means[0], means[0][0])
    L = np.zeros((d + 1, d + 1))
    L[:d, :d] = factors[0]
    L[d, :d] = factors[0][0]
    L[d, d] = np.exp(means[0][1])
    return new_spec, family.pack(new_spec, m, L)


def _split_factor(spec, lam):
    means, factors, _ = family.unpack(spec, lam)
    return means[0], factors[0]


def conditional_last(spec: FamilySpec, lam, head):
    """Mean and sd of the last coordinate given the others, per row of ``head``.

    Equivalent to :func:`family.conditional_slice` with all but the last
    coordinate fixed, vectorised over rows by using the triangular factor.
    """
    m, L = _split_factor(spec, lam)
    d = spec.dim
    from scipy.linalg import solve_triangular

    z = solve_triangular(L[:-1, :-1], (np.atleast_2d(head) - m[:-1]).T, lower=True, check_finite=False)
    return m[-1] + L[-1, :-1] @ z, L[-1, -1]


@dataclass
class HybridContext:
    """Fixed proposal draws for the old block plus fresh draws for the new effect."""

    spec: FamilySpec
    prev_spec: FamilySpec
    prev_lam: np.ndarray
    head: np.ndarray
    head_logq: np.ndarray
    y_new: float
    sigma_new: float
    nu: float = SCHOOLS_NU

    def estimate(self, lam, rng):
        from . import grad

        cond_mean, cond_sd = conditional_last(self.spec, lam, self.head)
        new = cond_mean + cond_sd * rng.standard_normal(cond_mean.size)
        draws = np.column_stack([self.head, new])
        logq, scores = family.log_density_and_score(self.spec, lam, draws)
        m, L = _split_factor(self.spec, lam)
        sub = FamilySpec(self.prev_spec.dim, 1)
        marg = family.pack(sub, m[:-1], L[:-1, :-1])
        logw = family.log_density(sub, marg, self.head) - self.head_logq
        ess = grad.effective_sample_size(logw)
        if not np.any(np.isfinite(logw)) or np.max(logw) > 700:
            raise grad.WeightDegeneracyError("importance weights underflow or overflow", ess)
        new_terms = school_terms(new, self.head[:, 0], self.head[:, 1], self.y_new, self.sigma_new, self.nu)
        payoff = new_terms + self.head_logq - logq
        # weights rescaled to average one, as in grad.is_gradient
        w = np.exp(logw - np.max(logw))
        est = grad.batch_gradient(scores, payoff, w * (w.size / np.sum(w)))
        est.effective_sample_size = ess
        return est


def schools_hybrid_context(prev_spec, prev_lam, y_new, sigma_new, S, seed=None, nu=SCHOOLS_NU):
    batch = family.sample(prev_spec, prev_lam, S, seed)
    return HybridContext(
        FamilySpec(prev_spec.dim + 1, 1),
        prev_spec,
        np.asarray(prev_lam, dtype=float),
        batch.draws,
        batch.log_q,
        float(y_new),
        float(sigma_new),
        nu,
    )


# ---------------------------------------------------------------------------
# Independent per-unit model with p(mu, sigma^2) ∝ 1/sigma^2


def independent_predictive_logdensity(history, y_future) -> float:
    """Student-t predictive with ``nu = T - 1``, location ``ybar`` and
    squared scale ``(T + 1) s^2 / T``."""
    y = np.asarray(history, dtype=float).ravel()
    T = y.size
    if T < 2:
        raise ValueError("need at least two observations")
    s2 = y.var(ddof=1)
    if s2 <= 0:
        raise ValueError("degenerate history: zero sample variance")
    nu = T - 1.0
    scale2 = (T + 1.0) * s2 / T
    z = (np.asarray(y_future, dtype=float) - y.mean()) / np.sqrt(scale2)
    out = t_logpdf(z, nu) - 0.5 * np.log(scale2)
    return float(out) if np.ndim(out) == 0 else out
