"""Unnormalised log targets, data windows and pseudo-posterior composition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import family


class ScheduleError(ValueError):
    """A data window is empty, out of order, or overlaps consumed data."""


@dataclass(frozen=True)
class DataWindow:
    """Observations with (0-based) time indices ``lo <= t < hi``, i.e. ``(lo, hi]`` in 1-based counts.

    ``observations`` is time-major: shape ``(hi - lo,)`` or ``(hi - lo, N)``.
    ``history`` optionally carries observations preceding the window that a
    model needs as conditioning lags.
    """

    observations: np.ndarray
    lo: int
    hi: int
    history: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.lo < 0 or self.hi <= self.lo:
            raise ScheduleError(f"invalid window ({self.lo}, {self.hi}]")
        if np.shape(self.observations)[0] != self.hi - self.lo:
            raise ScheduleError(
                f"window ({self.lo}, {self.hi}] holds {np.shape(self.observations)[0]} rows"
            )

    @property
    def length(self) -> int:
        return self.hi - self.lo


def make_window(data, lo: int, hi: int, lags: int = 0) -> DataWindow:
    data = np.asarray(data)
    if hi > data.shape[0]:
        raise ScheduleError(f"window end {hi} beyond data length {data.shape[0]}")
    if hi <= lo:
        raise ScheduleError(f"empty window ({lo}, {hi}]")
    history = data[max(lo - lags, 0):lo] if lags else None
    return DataWindow(data[lo:hi], lo, hi, history)


@dataclass
class TargetDensity:
    """Log of an unnormalised density.

    ``fn`` maps a batch ``(S, d)`` to ``(S,)``; calling the object with a
    single point returns a float.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    label: str = ""

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return float(self.fn(theta[None, :])[0])
        return np.asarray(self.fn(theta), dtype=float)


@dataclass(frozen=True)
class Approximation:
    """A fitted member of a family together with the data it has absorbed."""

    spec: family.FamilySpec
    lam: np.ndarray
    through: int = 0

    def log_density(self, theta):
        return family.log_density(self.spec, self.lam, theta)


def compose_posterior(log_prior: TargetDensity, log_lik, window: DataWindow) -> TargetDensity:
    if window.length < 1:
        raise ScheduleError("empty window")

    def fn(theta):
        return log_prior.fn(theta) + log_lik(theta, window)

    return TargetDensity(fn, label=f"posterior({window.lo},{window.hi}]")


def compose_pseudo_posterior(prev_q, log_lik, window: DataWindow) -> TargetDensity:
    """``log_lik(theta, window) + log q_prev(theta)``.

    ``prev_q`` is an :class:`Approximation` or a ``(spec, lam)`` pair. When it
    records the boundary it was fitted through, the window must start there.
    """
    if isinstance(prev_q, Approximation):
        approx = prev_q
        if window.lo != approx.through:
            raise ScheduleError(
                f"window ({window.lo}, {window.hi}] does not start at the previous "
                f"boundary {approx.through}"
            )
    else:
        spec, lam = prev_q
        approx = Approximation(spec, family.check_lambda(spec, lam), window.lo)
    if window.length < 1:
        raise ScheduleError("empty window")
    spec, lam = approx.spec, approx.lam

    def fn(theta):
        return log_lik(theta, window) + family.log_density(spec, lam, theta)

    return TargetDensity(fn, label=f"pseudo-posterior({window.lo},{window.hi}]")
