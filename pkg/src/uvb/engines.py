"""SVB one-shot fits and UVB / UVB-IS recursions over an update schedule."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import family, sga
from .family import FamilySpec
from .models import Model
from .target import DataWindow, ScheduleError, TargetDensity, make_window

log = logging.getLogger(__name__)

DEFAULT_S = 25
DEFAULT_S_IS = 100
DEFAULT_ESS_FLOOR = 10.0


@dataclass(frozen=True)
class UpdateSchedule:
    """Strictly increasing observation counts ``T_1 < T_2 < ...``."""

    boundaries: tuple

    def __init__(self, boundaries: Sequence[int]):
        b = tuple(int(x) for x in boundaries)
        if not b:
            raise ScheduleError("schedule needs at least one boundary")
        if b[0] < 1 or any(x >= y for x, y in zip(b, b[1:])):
            raise ScheduleError(f"boundaries must be positive and strictly increasing: {b}")
        object.__setattr__(self, "boundaries", b)

    def __len__(self):
        return len(self.boundaries)

    def check(self, n_obs: int) -> "UpdateSchedule":
        if self.boundaries[-1] > n_obs:
            raise ScheduleError(f"boundary {self.boundaries[-1]} beyond data length {n_obs}")
        return self

    def windows(self):
        """``(lo, hi)`` pairs: ``(0, T_1), (T_1, T_2), ...``."""
        edges = (0,) + self.boundaries
        return list(zip(edges[:-1], edges[1:]))


class LikelihoodCounter:
    """Wraps ``model.log_lik`` and tallies draw-observation evaluations per window."""

    def __init__(self, model: Model):
        self.model = model
        self.evaluations = 0
        self.windows = []

    def __call__(self, theta, window: DataWindow, context=None):
        theta = np.atleast_2d(theta)
        self.evaluations += theta.shape[0] * int(np.size(window.observations))
        if not self.windows or self.windows[-1] != (window.lo, window.hi):
            self.windows.append((window.lo, window.hi))
        return self.model.log_lik(theta, window, context)


@dataclass
class BoundaryRecord:
    boundary: int
    lam: np.ndarray
    spec: FamilySpec
    wall_time: float
    iterations: int
    converged: bool
    loglik_evals: int
    window: tuple
    trace: list = field(default_factory=list, repr=False)
    min_ess: Optional[float] = None
    warnings: list = field(default_factory=list)
    context: object = field(default=None, repr=False)

    def to_dict(self, **extra) -> dict:
        out = dict(extra)
        out.update(
            boundary=self.boundary,
            dim=self.spec.dim,
            components=self.spec.components,
            lam=[float(x) for x in self.lam],
            wall_time=self.wall_time,
            iterations=self.iterations,
            converged=self.converged,
            loglik_evals=self.loglik_evals,
            window=list(self.window),
            min_ess=self.min_ess,
            warnings=list(self.warnings),
        )
        return out


@dataclass
class PosteriorSequence:
    method: str
    records: List[BoundaryRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def boundaries(self):
        return [r.boundary for r in self.records]

    def cumulative_wall_time(self) -> np.ndarray:
        return np.cumsum([r.wall_time for r in self.records])

    def write_ndjson(self, stream, **extra) -> None:
        for r in self.records:
            stream.write(json.dumps(r.to_dict(method=self.method, **extra), sort_keys=True) + "\n")


def update_rng(seed, n: int) -> np.random.Generator:
    """Generator for update ``n``; update 0 (the first fit) uses ``seed`` itself."""
    if n == 0:
        return family.as_rng(seed)
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n,)))


def _fit_target(model, counter, window, context, prior=None):
    if prior is None:

        def fn(theta):
            return model.log_prior(theta) + counter(theta, window, context)

        return TargetDensity(fn, label=f"posterior({window.lo},{window.hi}]")
    pspec, plam = prior

    def fn(theta):
        return counter(theta, window, context) + family.log_density(pspec, plam, theta)

    return TargetDensity(fn, label=f"pseudo-posterior({window.lo},{window.hi}]")


def _record(boundary, result, spec, elapsed, counter, window, context, min_ess=None, notes=()):
    return BoundaryRecord(
        boundary=boundary,
        lam=result.lam,
        spec=spec,
        wall_time=elapsed,
        iterations=result.iterations,
        converged=result.converged,
        loglik_evals=counter.evaluations,
        window=window,
        trace=result.trace,
        min_ess=min_ess,
        warnings=list(notes) + ([result.message] if result.message else []),
        context=context,
    )


def svb_fit(
    model: Model,
    data,
    T_n: int,
    spec: FamilySpec,
    S: int = DEFAULT_S,
    seed=None,
    stop: sga.StopRule = sga.StopRule(),
    rate: float = 0.01,
) -> BoundaryRecord:
    """One SGA run on the exact posterior given observations ``1..T_n``."""
    data = np.asarray(data)
    if T_n > data.shape[0] or T_n < 1:
        raise ScheduleError(f"T_n={T_n} outside data of length {data.shape[0]}")
    start = time.perf_counter()
    rng = update_rng(seed, 0)
    window = make_window(data, 0, T_n, lags=model.lags)
    summary = model.absorb(None, window)
    context = model.prior_context(summary)
    counter = LikelihoodCounter(model)
    lam0 = model.init_lambda(spec, window, rng)
    result = sga.run(spec, lam0, _fit_target(model, counter, window, context), S, stop, rng, rate)
    elapsed = time.perf_counter() - start
    return _record(T_n, result, spec, elapsed, counter, (0, T_n), context)


def _run_updates(model, data, schedule, spec, S, seed, stop, rate, importance, ess_floor, S_first):
    data = np.asarray(data)
    schedule = schedule if isinstance(schedule, UpdateSchedule) else UpdateSchedule(schedule)
    schedule.check(data.shape[0])
    method = "uvb-is" if importance else "uvb"
    seq = PosteriorSequence(method)
    windows = schedule.windows()

    first = svb_fit(model, data, windows[0][1], spec, S_first, seed, stop, rate)
    seq.records.append(first)
    summary = model.absorb(None, make_window(data, *windows[0]))
    lam = first.lam
    for n, (lo, hi) in enumerate(windows[1:], start=1):
        start = time.perf_counter()
        rng = update_rng(seed, n)
        if model.context_draws:
            draws = family.sample(spec, lam, model.context_draws, rng).draws
            context = model.update_context(draws, summary)
        else:
            context = model.update_context(None, summary)
        window = make_window(data, lo, hi, lags=model.lags)
        summary = model.absorb(summary, window)
        counter = LikelihoodCounter(model)
        notes = []
        if importance:
            batch = family.sample(spec, lam, S, rng)
            batch.cached_loglik = counter(batch.draws, window, context)
            ctx = sga.ISContext(spec, lam, batch, ess_floor=ess_floor)
            result = sga.run(spec, lam, ctx, S, stop, rng, rate)
            min_ess = min((r["ess"] for r in result.trace), default=float(S))
            if result.degenerate_ess is not None:
                min_ess = min(min_ess, result.degenerate_ess)
                log.warning("update at T=%d: %s; kept the last iterate above it", hi, result.message)
        else:
            target = _fit_target(model, counter, window, context, prior=(spec, lam))
            result = sga.run(spec, lam, target, S, stop, rng, rate)
            min_ess = None
        elapsed = time.perf_counter() - start
        rec = _record(hi, result, spec, elapsed, counter, (lo, hi), context, min_ess, notes)
        seq.records.append(rec)
        lam = rec.lam
    return seq


def uvb_run(
    model: Model,
    data,
    schedule,
    spec: FamilySpec,
    S: int = DEFAULT_S,
    seed=None,
    stop: sga.StopRule = sga.StopRule(),
    rate: float = 0.01,
) -> PosteriorSequence:
    """SVB at ``T_1``, then score-gradient updates on each new window, warm-started."""
    return _run_updates(model, data, schedule, spec, S, seed, stop, rate, False, None, S)


def uvbis_run(
    model: Model,
    data,
    schedule,
    spec: FamilySpec,
    S: int = DEFAULT_S_IS,
    seed=None,
    stop: sga.StopRule = sga.StopRule(),
    rate: float = 0.01,
    ess_floor: float = DEFAULT_ESS_FLOOR,
    S_first: int = DEFAULT_S,
) -> PosteriorSequence:
    """SVB at ``T_1`` (with ``S_first`` draws), then importance-sampled updates.

    Each update draws ``S`` points from the previous optimum once and evaluates
    the window likelihood once per draw; every SGA iteration reuses them.
    """
    return _run_updates(model, data, schedule, spec, S, seed, stop, rate, True, ess_floor, S_first)


def svb_run(
    model: Model,
    data,
    schedule,
    spec: FamilySpec,
    S: int = DEFAULT_S,
    seed=None,
    stop: sga.StopRule = sga.StopRule(),
    rate: float = 0.01,
) -> PosteriorSequence:
    """Independent SVB re-fits from scratch at every boundary."""
    data = np.asarray(data)
    schedule = schedule if isinstance(schedule, UpdateSchedule) else UpdateSchedule(schedule)
    schedule.check(data.shape[0])
    seq = PosteriorSequence("svb")
    for n, T_n in enumerate(schedule.boundaries):
        seq.records.append(svb_fit(model, data, T_n, spec, S, update_rng(seed, n), stop, rate))
    return seq
