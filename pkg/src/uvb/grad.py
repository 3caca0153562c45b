"""Score-function ELBO gradient estimators with per-coordinate control variates."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import family
from .family import DrawBatch, FamilySpec

# exp() overflows past this
_MAX_LOG_WEIGHT = 700.0


class DegenerateTargetError(RuntimeError):
    """The target is -inf (or nan) at every draw."""


class WeightDegeneracyError(RuntimeError):
    def __init__(self, message, ess):
        super().__init__(f"{message} (ESS={ess:.3g})")
        self.ess = ess


def _median(x) -> float:
    # np.median's wrapper dominates for the short vectors traced every iteration
    n = x.size
    part = np.partition(x, [(n - 1) // 2, n // 2])
    return float(0.5 * (part[(n - 1) // 2] + part[n // 2]))


@dataclass
class GradientEstimate:
    gradient: np.ndarray
    elbo_estimate: float
    per_sample_variance: np.ndarray
    effective_sample_size: float
    n_draws: int = 1

    @property
    def estimator_variance(self) -> np.ndarray:
        """Variance of the averaged gradient (per-sample variance / S)."""
        return self.per_sample_variance / self.n_draws

    def trace_record(self, iteration: int) -> dict:
        return {
            "iteration": int(iteration),
            "elbo": float(self.elbo_estimate),
            "grad_norm": float(np.linalg.norm(self.gradient)),
            "grad_var_median": _median(self.estimator_variance),
            "ess": float(self.effective_sample_size),
        }


def control_variates(scores: np.ndarray, payoff: np.ndarray) -> np.ndarray:
    """Per-draw, per-coordinate ``a_k`` from the other draws of the batch.

    ``scores`` is ``(S, P)`` and ``payoff`` ``(S,)``; the result is ``(S, P)``.
    Row ``j`` is ``Cov(s_k h, s_k) / Var(s_k)`` over the batch without draw
    ``j``, so it is independent of draw ``j`` and the gradient estimate stays
    unbiased (a ratio estimated on the full batch, draw ``j`` included, biases
    the average gradient by a sizeable fraction at ``S = 25``). The score has
    mean zero under the sampling distribution, so the moments are taken about
    zero rather than the batch mean: ``a_k = sum(s_k^2 h) / sum(s_k^2)``. This
    keeps ``a_k`` inside the range of the payoffs even when a coordinate's
    score is nearly constant over the batch (e.g. the logit of an unvisited
    mixture component), where the centred ratio is unstable. Coordinates whose
    other scores are all zero get ``a_k = 0``.
    """
    sq = scores * scores
    num = payoff[:, None] * sq
    var = np.sum(sq, axis=0)[None, :] - sq
    cov = np.sum(num, axis=0)[None, :] - num
    out = np.zeros_like(sq)
    # relative guard: cancellation leaves round-off where the other scores are all zero
    ok = var > 1e-12 * np.max(sq, axis=0, initial=0.0)[None, :]
    out[ok] = cov[ok] / var[ok]
    return out


def batch_gradient(scores, payoff, weights=None) -> GradientEstimate:
    """Gradient from a batch of scores and payoffs ``log p - log q``.

    With importance weights the estimate is ``mean(w * s * (h - a))`` and the
    control variates are computed from the weighted scores ``w * s``.
    """
    scores = np.asarray(scores, dtype=float)
    payoff = np.asarray(payoff, dtype=float)
    S = payoff.shape[0]
    if S < 2:
        raise ValueError("control variates need at least two draws")
    if not np.any(np.isfinite(payoff)):
        raise DegenerateTargetError("target is -inf at every draw")
    if weights is None:
        ws = scores
        ess = float(S)
        elbo = float(np.sum(payoff)) / S
    else:
        weights = np.asarray(weights, dtype=float)
        ws = scores * weights[:, None]
        sw = float(np.sum(weights))
        ess = sw * sw / float(np.dot(weights, weights))
        elbo = float(np.dot(weights, payoff)) / S
    a = control_variates(ws, payoff)
    contrib = ws * (payoff[:, None] - a)
    gradient = np.sum(contrib, axis=0) / S
    resid = contrib - gradient
    return GradientEstimate(
        gradient=gradient,
        elbo_estimate=elbo,
        per_sample_variance=np.sum(resid * resid, axis=0) / (S - 1),
        effective_sample_size=ess,
        n_draws=S,
    )


def score_gradient(spec: FamilySpec, lam, target, S: int, seed=None) -> GradientEstimate:
    """Score-based estimate of the ELBO gradient from ``S`` fresh draws of ``q_lam``."""
    if S < 2:
        raise ValueError("S must be at least 2")
    params = family.unpack(spec, lam)
    draws = family.draw_points(spec, params, S, seed)
    logq, scores = family.log_density_and_score(spec, lam, draws, params)
    return batch_gradient(scores, target.fn(draws) - logq)


def score_gradient_on_batch(spec, lam, target, batch: DrawBatch) -> GradientEstimate:
    logq, scores = family.log_density_and_score(spec, lam, batch.draws)
    logp = target.fn(batch.draws)
    return batch_gradient(scores, logp - logq)


def log_weights(spec, lam_new, batch: DrawBatch):
    """``log q_new(theta_j) - log q_proposal(theta_j)`` plus new log q and scores."""
    logq_new, scores = family.log_density_and_score(spec, lam_new, batch.draws)
    return logq_new - batch.log_q, logq_new, scores


def effective_sample_size(logw) -> float:
    logw = np.asarray(logw, dtype=float)
    if not np.any(np.isfinite(logw)):
        return 0.0
    w = np.exp(logw - np.max(logw))
    return float(np.sum(w) ** 2 / np.sum(w**2))


def is_gradient(spec, lam_new, proposal, batch: DrawBatch, prior_logq=None) -> GradientEstimate:
    """Importance-sampled gradient for a pseudo-posterior target.

    ``batch`` holds draws from ``proposal = (spec, lam_prev)`` with their
    proposal log densities and the cached window log likelihood. The target is
    ``cached_loglik + prior_logq`` where ``prior_logq`` defaults to the
    proposal log density (the previous approximation). Only ``log q`` and the
    score under ``lam_new`` are recomputed.

    The weights ``q_new / q_proposal`` are rescaled to average one. With raw
    weights and a fixed batch, a payoff far below zero (as any sizeable window
    log likelihood is) rewards moving ``q_new`` away from every draw, since
    that shrinks all the weights towards zero; the rescaled weights remove that
    incentive and leave identity weights unchanged.
    """
    if batch.cached_loglik is None:
        raise ValueError("batch has no cached log likelihood")
    prop_spec, _ = proposal
    if prop_spec != spec:
        raise ValueError("proposal and candidate must share a family")
    if prior_logq is None:
        prior_logq = batch.log_q
    logw, logq_new, scores = log_weights(spec, lam_new, batch)
    if not np.any(np.isfinite(logw)) or np.max(logw) > _MAX_LOG_WEIGHT:
        raise WeightDegeneracyError("importance weights underflow or overflow", effective_sample_size(logw))
    # self-normalised so the weights average one; see the docstring
    weights = np.exp(logw - np.max(logw))
    weights *= weights.size / np.sum(weights)
    payoff = batch.cached_loglik + prior_logq - logq_new
    return batch_gradient(scores, payoff, weights)


def elbo(spec, lam, target, S: int, seed=None) -> float:
    """Monte Carlo ELBO ``mean(log p - log q)``."""
    batch = family.sample(spec, lam, S, seed)
    return float(np.mean(target.fn(batch.draws) - batch.log_q))


def is_elbo(spec, lam_new, batch: DrawBatch, prior_logq=None) -> float:
    """Importance-weighted ELBO with weights rescaled to average one, as in :func:`is_gradient`."""
    if prior_logq is None:
        prior_logq = batch.log_q
    logq_new = family.log_density(spec, lam_new, batch.draws)
    logw = logq_new - batch.log_q
    w = np.exp(logw - np.max(logw))
    w *= w.size / np.sum(w)
    return float(np.mean(w * (batch.cached_loglik + prior_logq - logq_new)))


def write_trace(records, stream) -> None:
    """Append iteration records to an NDJSON stream."""
    for rec in records:
        stream.write(json.dumps(rec, sort_keys=True) + "\n")
