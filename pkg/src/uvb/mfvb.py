"""Mean-field coordinate ascent for the DPM under the stick-breaking construction.

The factorised approximation has ``Beta(a_j, b_j)`` stick fractions,
``N(gamma_j, tau_j)`` cluster means, ``InvGamma(alpha_j, kappa_j)`` cluster
variances and categorical responsibilities ``rho[i, j]``. The truncation level
equals the number of units, with the last stick fraction fixed at one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import digamma, gammaincinv

from .family import as_rng, logsumexp
from .models import PanelStats

log = logging.getLogger(__name__)

ALPHA0 = 0.15275
KAPPA0 = 0.00102
PRIOR_MEAN_VAR = 10.0
LOG_SIGMA2_DRAWS = 1000


@dataclass
class MFVBState:
    a: np.ndarray
    b: np.ndarray
    gamma: np.ndarray
    tau: np.ndarray
    alpha: np.ndarray
    kappa: np.ndarray
    rho: np.ndarray
    passes: int = 0
    converged: bool = False
    history: list = field(default_factory=list, repr=False)
    stats: Optional[PanelStats] = field(default=None, repr=False)

    def check(self) -> "MFVBState":
        for name in ("a", "b", "tau", "alpha", "kappa"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise FloatingPointError(f"non-positive or non-finite {name}")
        if not np.all(np.isfinite(self.gamma)):
            raise FloatingPointError("non-finite gamma")
        if np.any(self.rho < 0) or not np.allclose(self.rho.sum(axis=1), 1.0, atol=1e-10):
            raise FloatingPointError("responsibility rows must be probability vectors")
        return self

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.a, self.b, self.gamma, self.tau, self.alpha, self.kappa, self.rho.ravel()]
        )

    def snapshot(self, boundary=None) -> str:
        w = self.rho.mean(axis=0)
        return json.dumps(
            {
                "boundary": boundary,
                "cluster": {
                    "mu": self.gamma.tolist(),
                    "log_sigma2": np.log(self.kappa / np.maximum(self.alpha - 1, 1e-12)).tolist(),
                    "weight": w.tolist(),
                },
                "passes": self.passes,
                "converged": self.converged,
            },
            sort_keys=True,
        )


def expected_log_stick(a, b) -> np.ndarray:
    """``E[log beta_j]`` with ``beta_j = beta'_j prod_{l<j} (1 - beta'_l)``.

    The last fraction is fixed at one, so its own term vanishes.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    total = digamma(a + b)
    own = digamma(a) - total
    own[-1] = 0.0
    rest = digamma(b) - total
    before = np.concatenate([[0.0], np.cumsum(rest[:-1])])
    return own + before


def expected_log_sigma2(alpha, kappa, uniforms) -> np.ndarray:
    """Monte Carlo ``E[log sigma2]`` under ``InvGamma(alpha_j, kappa_j)``.

    Draws are produced by inverting the gamma CDF at a fixed set of uniforms,
    so the estimate is a smooth deterministic function of ``(alpha, kappa)``.
    """
    g = gammaincinv(np.asarray(alpha, dtype=float)[:, None], np.asarray(uniforms)[None, :])
    return np.log(kappa) - np.mean(np.log(g), axis=1)


def _sticks(rho):
    n = rho.sum(axis=0)
    tail = np.cumsum(n[::-1])[::-1]
    after = np.concatenate([tail[1:], [0.0]])
    return n, after


def mfvb_coordinate_pass(state: MFVBState, stats: PanelStats, uniforms, dp_alpha=1.0,
                         alpha0=ALPHA0, kappa0=KAPPA0, prior_var=PRIOR_MEAN_VAR) -> MFVBState:
    """One sweep through the updates in the order a, b, rho, gamma, tau, alpha, kappa."""
    n_i, s1, s2 = stats.n, stats.s1, stats.s2
    T = n_i[:, None]
    counts, after = _sticks(state.rho)
    a = 1.0 + counts
    b = dp_alpha + after

    e_prec = state.alpha / state.kappa
    e_logs = expected_log_sigma2(state.alpha, state.kappa, uniforms)
    sq = s2[:, None] - 2.0 * state.gamma[None, :] * s1[:, None] + T * (state.gamma**2 + state.tau)[None, :]
    logr = -0.5 * T * e_logs[None, :] - 0.5 * e_prec[None, :] * sq + expected_log_stick(a, b)[None, :]
    rho = np.exp(logr - logsumexp(logr, axis=1)[:, None])
    rho /= rho.sum(axis=1, keepdims=True)

    rt = rho.T @ n_i
    denom = prior_var * e_prec * rt + 1.0
    gamma = prior_var * e_prec * (rho.T @ s1) / denom
    tau = prior_var / denom
    alpha = alpha0 + 0.5 * rt
    resid = s2[:, None] + T * (gamma**2 + tau)[None, :] - 2.0 * gamma[None, :] * s1[:, None]
    kappa = kappa0 + 0.5 * np.sum(rho * resid, axis=0)
    return MFVBState(a, b, gamma, tau, alpha, kappa, rho, state.passes + 1).check()


def mfvb_init(panel, seed=None) -> MFVBState:
    """Start with cluster ``j`` holding unit ``j`` and moments from that unit's data."""
    y = np.asarray(panel, dtype=float)
    T, N = y.shape
    rho = np.eye(N)
    var = np.maximum(y.var(axis=0), 1e-6)
    alpha = ALPHA0 + 0.5 * T * np.ones(N)
    kappa = var * (alpha - 1 if np.all(alpha > 1) else alpha)
    return MFVBState(
        a=np.ones(N), b=np.ones(N), gamma=y.mean(axis=0), tau=var / T,
        alpha=alpha, kappa=np.maximum(kappa, 1e-6), rho=rho,
    ).check()


def mfvb_fit(panel, T_n, tol=1e-6, max_passes=500, seed=None, dp_alpha=1.0) -> MFVBState:
    """Coordinate ascent on observations ``1..T_n`` until every parameter moves by < ``tol``."""
    panel = np.asarray(panel, dtype=float)
    if T_n < 2 or T_n > panel.shape[0]:
        raise ValueError(f"need 2 <= T_n <= {panel.shape[0]}, got {T_n}")
    y = panel[:T_n]
    stats = PanelStats.from_window(y)
    uniforms = as_rng(seed).random(LOG_SIGMA2_DRAWS)
    state = mfvb_init(y)
    prev = state.vector()
    for _ in range(max_passes):
        state = mfvb_coordinate_pass(state, stats, uniforms, dp_alpha)
        cur = state.vector()
        change = float(np.max(np.abs(cur - prev)))
        state.history.append(change)
        prev = cur
        if change < tol:
            state.converged = True
            break
    if not state.converged:
        log.warning("coordinate ascent stopped after %d passes without converging", state.passes)
    state.stats = stats
    return state


def mfvb_draws(state: MFVBState, M=100, seed=None):
    """``M`` draws of ``(theta* (M,N,2), k (M,N))`` from the factorised approximation."""
    rng = as_rng(seed)
    N = state.gamma.size
    mu = state.gamma + np.sqrt(state.tau) * rng.standard_normal((M, N))
    sigma2 = state.kappa / rng.gamma(state.alpha, size=(M, N))
    u = rng.random((M, N))
    cdf = np.cumsum(state.rho, axis=1)
    k = np.minimum((cdf[None, :, :] < u[..., None] * cdf[:, -1][None, :, None]).sum(axis=2), N - 1)
    return np.stack([mu, np.log(sigma2)], axis=-1), k


def mfvb_predictive_logscore(state: MFVBState, unit: int, y_future, M=100, seed=None) -> np.ndarray:
    """Per-value log of the draw-averaged normal predictive density for ``unit``."""
    from .dpm import dpm_predictive_logscore

    theta, k = mfvb_draws(state, M, seed)
    return dpm_predictive_logscore(theta, k, unit, y_future)
