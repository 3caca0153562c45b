"""Random-walk Metropolis-Hastings with burn-in adaptation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .family import as_rng

log = logging.getLogger(__name__)

TARGET_ACCEPTANCE = 0.234


@dataclass(frozen=True)
class ChainConfig:
    """Chain length settings; the first ``burn_in`` iterations are discarded.

    During burn-in the proposal scale follows a Robbins-Monro recursion towards
    ``TARGET_ACCEPTANCE`` and, every ``cov_every`` iterations after
    ``cov_start``, the proposal shape is reset to the empirical covariance of
    the burn-in draws so far. Both are frozen once burn-in ends.
    """

    iterations: int = 15000
    burn_in: int = 10000
    scale: Optional[float] = None
    seed: object = None
    thin: int = 1
    adapt_covariance: bool = True
    cov_start: int = 1000
    cov_every: int = 500

    def __post_init__(self):
        if not (self.iterations > self.burn_in >= 0):
            raise ValueError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class ChainResult:
    draws: np.ndarray
    acceptance_rate: float
    scale: float
    proposal_cov: np.ndarray


def metropolis_accept(delta_logp: float, u: float) -> bool:
    """Accept with probability ``min(1, exp(delta_logp))`` given ``u ~ U[0, 1)``."""
    if np.isnan(delta_logp):
        return False
    return delta_logp >= 0 or np.log(u) < delta_logp


def rwmh_sample(target, d: int, config: ChainConfig = ChainConfig(), x0=None) -> ChainResult:
    """Gaussian random-walk Metropolis-Hastings on ``target`` (log density)."""
    rng = as_rng(config.seed)
    x = np.zeros(d) if x0 is None else np.array(x0, dtype=float).reshape(d)
    logp = float(target(x))
    if not np.isfinite(logp):
        raise ValueError("target is not finite at the starting point")
    scale = 2.38 / np.sqrt(d) if config.scale is None else float(config.scale)
    chol = np.eye(d)
    history = np.empty((config.burn_in, d))
    kept = []
    accepted = 0
    post_accepted = 0
    since_accept = 0
    stuck_warned = False
    for it in range(config.iterations):
        z = rng.standard_normal(d)
        u = rng.random()
        prop = x + scale * (chol @ z)
        lp = float(target(prop))
        ok = metropolis_accept(lp - logp, u)
        if ok:
            x, logp = prop, lp
            accepted += 1
        if it < config.burn_in:
            history[it] = x
            gain = 1.0 / (it + 1) ** 0.6
            scale *= np.exp(gain * ((1.0 if ok else 0.0) - TARGET_ACCEPTANCE))
            if (
                config.adapt_covariance
                and it + 1 >= config.cov_start
                and (it + 1) % config.cov_every == 0
            ):
                cov = np.atleast_2d(np.cov(history[it + 1 - config.cov_start + 0 : it + 1].T))
                cov = cov + 1e-10 * np.eye(d) * max(np.trace(cov) / d, 1e-300)
                try:
                    new_chol = np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    new_chol = None
                if new_chol is not None:
                    chol = new_chol
                    scale = 2.38 / np.sqrt(d)
        else:
            post_accepted += ok
            since_accept = 0 if ok else since_accept + 1
            if since_accept >= 1000 and not stuck_warned:
                warnings.warn("no proposal accepted in 1000 post-burn-in iterations", RuntimeWarning)
                stuck_warned = True
            if (it - config.burn_in) % config.thin == 0:
                kept.append(x.copy())
    n_post = config.iterations - config.burn_in
    return ChainResult(
        draws=np.array(kept),
        acceptance_rate=post_accepted / n_post,
        scale=scale,
        proposal_cov=scale**2 * chol @ chol.T,
    )
