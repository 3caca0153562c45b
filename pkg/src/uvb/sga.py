"""Stochastic gradient ascent on the ELBO with Adam step sizes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from . import grad
from .family import DrawBatch, FamilySpec, as_rng, check_lambda
from .target import TargetDensity

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, rate=0.01, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        if rate < 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("invalid Adam hyperparameters")
        return cls(0, np.zeros(n), np.zeros(n), rate, beta1, beta2, eps)


def adam_step(state: AdamState, lam, g):
    """One bias-corrected Adam move *up* the gradient. Returns ``(state, lam)``."""
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    lam = np.asarray(lam, dtype=float)
    step = state.step + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    new_lam = lam + state.rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=step, first_moment=m, second_moment=v), new_lam


@dataclass(frozen=True)
class StopRule:
    """Stop once the smoothed ELBO change drops below ``tolerance``.

    The smoothed change compares the mean ELBO over the latest ``k`` iterations
    with the mean over the ``k`` before them, where ``k`` grows from half the
    smoothing window (first checked after ``smoothing_window`` iterations) up
    to the full window. With ``relative=True`` the threshold is
    ``tolerance * |mean ELBO over the latest k iterations|``.

    ``patience`` guards runs whose ELBO noise swamps the threshold: if the
    full-window mean ELBO has not set a new best for that many iterations the
    run stops and :func:`run` returns the parameters at the best window.
    """

    tolerance: float = 1e-4
    smoothing_window: int = 50
    max_iterations: int = 5000
    relative: bool = True
    patience: Optional[int] = 500

    def __post_init__(self):
        bad_patience = self.patience is not None and self.patience < 1
        if self.max_iterations < 1 or self.smoothing_window < 2 or self.tolerance <= 0 or bad_patience:
            raise ValueError(f"invalid stop rule {self}")

    def smoothed_change(self, elbos) -> Optional[float]:
        k = self._span(len(elbos))
        if k is None:
            return None
        recent = np.mean(elbos[-k:])
        earlier = np.mean(elbos[-2 * k:-k])
        return abs(recent - earlier)

    def _span(self, n):
        if n < self.smoothing_window:
            return None
        return min(self.smoothing_window, n // 2)

    def threshold(self, elbos) -> float:
        if not self.relative:
            return self.tolerance
        k = self._span(len(elbos)) or self.smoothing_window
        return self.tolerance * abs(np.mean(elbos[-k:]))

    def satisfied(self, elbos) -> bool:
        change = self.smoothed_change(elbos)
        return change is not None and change < self.threshold(elbos)


@dataclass
class ISContext:
    """Fixed draws from a proposal with their cached window log likelihood.

    With ``ess_floor`` set, a parameter value whose weights have effective
    sample size below the floor raises :class:`grad.WeightDegeneracyError`, so
    :func:`run` keeps the iterate within the region the draws can support.
    """

    spec: FamilySpec
    proposal_lam: np.ndarray
    batch: DrawBatch
    prior_logq: Optional[np.ndarray] = None
    ess_floor: Optional[float] = None

    def estimate(self, lam, rng=None) -> grad.GradientEstimate:
        est = grad.is_gradient(
            self.spec, lam, (self.spec, self.proposal_lam), self.batch, self.prior_logq
        )
        if self.ess_floor is not None and est.effective_sample_size < self.ess_floor:
            raise grad.WeightDegeneracyError(
                f"effective sample size below floor {self.ess_floor:g}", est.effective_sample_size
            )
        return est


@dataclass
class RunResult:
    lam: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    message: str = ""
    best_iteration: Optional[int] = None
    degenerate_ess: Optional[float] = None

    @property
    def elbos(self) -> np.ndarray:
        return np.array([r["elbo"] for r in self.trace])


Objective = Union[TargetDensity, ISContext, Callable]


def _estimator(spec, objective, S):
    if isinstance(objective, TargetDensity):
        return lambda lam, rng: grad.score_gradient(spec, lam, objective, S, rng)
    if isinstance(objective, ISContext):
        return objective.estimate
    if callable(objective):
        return objective
    raise TypeError(f"unsupported objective {type(objective).__name__}")


def run(
    spec: Optional[FamilySpec],
    lam0,
    objective: Objective,
    S: int = 25,
    stop: StopRule = StopRule(),
    seed=None,
    rate: float = 0.01,
    trace_first: bool = True,
) -> RunResult:
    """Iterate Adam steps on the estimated ELBO gradient until ``stop`` fires.

    ``objective`` is a :class:`TargetDensity` (fresh score-based draws each
    iteration), an :class:`ISContext` (importance-sampled gradients from fixed
    draws) or any callable ``(lam, rng) -> GradientEstimate``. ``spec`` may be
    ``None`` for callables that manage their own parameter layout.
    """
    lam = np.array(lam0, dtype=float) if spec is None else check_lambda(spec, lam0).copy()
    rng = as_rng(seed)
    estimate = _estimator(spec, objective, S)
    state = AdamState.fresh(lam.size, rate=rate)
    result = RunResult(lam=lam)
    elbos = []
    window = stop.smoothing_window
    best, best_lam, best_it = -np.inf, lam.copy(), 0
    previous = lam
    for it in range(1, stop.max_iterations + 1):
        try:
            est = estimate(lam, rng)
        except grad.WeightDegeneracyError as exc:
            log.info("stopping at iteration %d: %s", it, exc)
            result.message = str(exc)
            result.degenerate_ess = exc.ess
            result.lam = previous
            return result
        previous = lam
        rec = est.trace_record(it)
        if trace_first:
            rec["grad_var_first"] = float(est.estimator_variance[0])
        result.trace.append(rec)
        state, lam = adam_step(state, lam, est.gradient)
        result.iterations = it
        elbos.append(est.elbo_estimate)
        if stop.satisfied(elbos):
            result.converged = True
            break
        if it >= window:
            smoothed = float(np.mean(elbos[-window:]))
            if smoothed > best:
                # lam now reflects the window's final step; the window's
                # midpoint iterate would be marginally closer but costs a buffer
                best, best_lam, best_it = smoothed, lam.copy(), it
            elif stop.patience is not None and it - best_it >= stop.patience:
                result.message = f"no smoothed ELBO gain for {stop.patience} iterations"
                break
    result.lam = lam
    if not result.converged and best_it:
        result.lam, result.best_iteration = best_lam, best_it
    return result
