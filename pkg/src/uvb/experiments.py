"""Replication drivers for the simulation studies, the schools study and the DPM forecasts.

Every driver takes an integer replication index and a base seed and returns a
``ScoreTable`` holding metric rows (reproducible from the seed alone) and wall
times (kept apart). Seeds for replication ``r`` come from
``SeedSequence(seed, spawn_key=(r,))``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import dpm, engines, family, mcmc, mfvb, models, sga
from .evaluate import ScoreTable, knn_kl
from .family import FamilySpec
from .target import TargetDensity, make_window

log = logging.getLogger(__name__)

AR3_SCHEDULE = tuple(range(100, 501, 25))
MIXTURE_SCHEDULE = tuple(range(10, 101, 10))
DPM_SCHEDULE = (50, 75, 100)
SCHOOLS_Y = (28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0)
SCHOOLS_SIGMA = (15.0, 10.0, 16.0, 11.0, 9.0, 11.0, 10.0, 18.0)

VB_METHODS = ("svb", "uvb", "uvb-is")


def replication_rng(seed, rep: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep, stream)))


def replication_seed(seed, rep: int, stream: int) -> int:
    return int(replication_rng(seed, rep, stream).integers(2**63 - 1))


def _run_vb(method, model, data, schedule, spec, S, S_is, seed, stop):
    if method == "svb":
        return engines.svb_run(model, data, schedule, spec, S, seed, stop)
    if method == "uvb":
        return engines.uvb_run(model, data, schedule, spec, S, seed, stop)
    if method == "uvb-is":
        return engines.uvbis_run(model, data, schedule, spec, S_is, seed, stop, S_first=S)
    raise ValueError(f"unknown method {method!r}")


def _keep_records(table, rep, method, K, seq):
    """Store per-boundary snapshots and SGA traces in ``table.extras``."""
    for r in seq.records:
        snap = r.to_dict(replication=rep, method=method, K=K)
        snap.pop("wall_time")
        table.extras.setdefault("snapshots", []).append(snap)
        for t in r.trace:
            table.extras.setdefault("traces", []).append(
                dict(t, replication=rep, method=method, K=K, boundary=r.boundary))


# ---------------------------------------------------------------------------
# AR(3) forecasting


@dataclass
class AR3Settings:
    T: int = 500
    schedule: tuple = AR3_SCHEDULE
    Ks: tuple = (1, 2, 3)
    methods: tuple = VB_METHODS + ("mcmc",)
    S: int = engines.DEFAULT_S
    S_is: int = engines.DEFAULT_S_IS
    predictive_draws: int = 1000
    chain: mcmc.ChainConfig = field(default_factory=mcmc.ChainConfig)
    stop: sga.StopRule = field(default_factory=sga.StopRule)


def ar3_replication(rep: int, seed, settings: AR3Settings = AR3Settings()) -> ScoreTable:
    """Simulate one series and score every method's one-step forecasts.

    Rows: ``cls``, the running sum over boundaries of the log score of
    ``y_{T_n+1}``. ``table.extras["grad_var"][(method, K)]`` keeps, per boundary,
    the first-coordinate estimator variance over the first 100 SGA iterations.
    """
    table = ScoreTable()
    params = models.ar3_draw_params(replication_rng(seed, rep, 0))
    # one extra point so the last boundary has a realised next value
    y = models.ar3_simulate(params, settings.T + 1, replication_rng(seed, rep, 1))
    model = models.AR3Model()
    schedule = engines.UpdateSchedule(settings.schedule).check(settings.T)
    for method in settings.methods:
        Ks = (0,) if method == "mcmc" else settings.Ks
        for K in Ks:
            start = time.perf_counter()
            if method == "mcmc":
                scores, times = _ar3_mcmc(model, y, schedule, settings, replication_seed(seed, rep, 2))
                traces = None
            else:
                spec = FamilySpec(5, K)
                seq = _run_vb(method, model, y, schedule, spec, settings.S, settings.S_is,
                              replication_seed(seed, rep, 3), settings.stop)
                scores = []
                for r in seq.records:
                    draws = family.sample(spec, r.lam, settings.predictive_draws,
                                          replication_rng(seed, rep, 4)).draws
                    scores.append(models.ar3_predictive_logscore(draws, y[: r.boundary], y[r.boundary]))
                times = [r.wall_time for r in seq.records]
                traces = [[t.get("grad_var_first", np.nan) for t in r.trace[:100]] for r in seq.records]
                _keep_records(table, rep, method, K, seq)
            cls = np.cumsum(scores)
            for i, T_n in enumerate(schedule.boundaries):
                table.add(rep, method, K, T_n, "cls", cls[i])
                table.add_time(rep, method, K, T_n, float(np.sum(times[: i + 1])))
            if traces is not None:
                table.extras.setdefault("grad_var", {})[(method, K)] = traces
            log.info("ar3 rep=%d %s K=%d CLS=%.3f (%.1fs)", rep, method, K, cls[-1], time.perf_counter() - start)
    return table


def _ar3_mcmc(model, y, schedule, settings, seed):
    scores, times = [], []
    x0 = None
    for n, T_n in enumerate(schedule.boundaries):
        start = time.perf_counter()
        window = make_window(y, 0, T_n, lags=model.lags)

        def target(th, window=window):
            return float(model.log_prior(th)[0] + model.log_lik(th, window)[0])

        if x0 is None:
            x0 = np.array([y[:T_n].mean(), 0.0, 0.0, 0.0, np.log(y[:T_n].var())])
        cfg = mcmc.ChainConfig(
            iterations=settings.chain.iterations, burn_in=settings.chain.burn_in,
            seed=np.random.SeedSequence(seed, spawn_key=(n,)),
        )
        res = mcmc.rwmh_sample(target, 5, cfg, x0=x0)
        x0 = res.draws[-1]
        scores.append(models.ar3_predictive_logscore(res.draws, y[:T_n], y[T_n]))
        times.append(time.perf_counter() - start)
    return scores, times


# ---------------------------------------------------------------------------
# Mixture clustering


@dataclass
class MixtureSettings:
    N: int = 50
    T: int = 100
    schedule: tuple = MIXTURE_SCHEDULE
    Ks: tuple = (1,)
    methods: tuple = VB_METHODS
    S: int = engines.DEFAULT_S
    S_is: int = engines.DEFAULT_S_IS
    class_draws: int = 100
    stop: sga.StopRule = field(default_factory=sga.StopRule)


def mixture_replication(rep: int, seed, settings: MixtureSettings = MixtureSettings()) -> ScoreTable:
    """Classification accuracy of each method at every boundary of one simulated panel."""
    table = ScoreTable()
    y, labels = models.mixture_simulate(settings.N, settings.T, replication_rng(seed, rep, 0))
    model = models.MixtureModel(settings.N, context_draws=settings.class_draws)
    schedule = engines.UpdateSchedule(settings.schedule).check(settings.T)
    prior = models.initial_class_probs(settings.N)
    for method in settings.methods:
        for K in settings.Ks:
            spec = FamilySpec(4, K)
            seq = _run_vb(method, model, y, schedule, spec, settings.S, settings.S_is,
                          replication_seed(seed, rep, 1), settings.stop)
            _keep_records(table, rep, method, K, seq)
            cum = 0.0
            for r in seq.records:
                draws = family.sample(spec, r.lam, settings.class_draws, replication_rng(seed, rep, 2)).draws
                probs = models.mixture_class_probs(draws, y[: r.boundary], prior)
                acc = models.classification_accuracy(np.argmax(probs, axis=1), labels)
                cum += r.wall_time
                table.add(rep, method, K, r.boundary, "accuracy", acc)
                table.add_time(rep, method, K, r.boundary, cum)
            log.info("mixture rep=%d %s K=%d accuracy=%.3f (%.1fs)", rep, method, K, acc, cum)
    return table


# ---------------------------------------------------------------------------
# Eight schools, one school at a time


@dataclass
class SchoolsSettings:
    y: tuple = SCHOOLS_Y
    sigma: tuple = SCHOOLS_SIGMA
    methods: tuple = ("svb", "uvb", "uvb-is")
    S: int = engines.DEFAULT_S
    S_is: int = engines.DEFAULT_S_IS
    draws: int = 5000
    first_prior: models.SchoolsHyperprior = field(default_factory=models.SchoolsHyperprior)
    stop: sga.StopRule = field(default_factory=sga.StopRule)
    chain: mcmc.ChainConfig = field(default_factory=lambda: mcmc.ChainConfig(iterations=60000, burn_in=10000, thin=5))


def schools_sequence(y, sigma, method, S=engines.DEFAULT_S, S_is=engines.DEFAULT_S_IS, seed=None,
                     stop=sga.StopRule(), first_prior=models.SchoolsHyperprior()):
    """Fit the first school, then add schools one at a time.

    Returns ``(spec, lam)`` after each school. The first fit uses
    ``first_prior`` on ``(mu, log tau)`` because the flat-prior posterior of a
    single school is improper; every later step adds one school to the
    previous approximation, with fresh draws (``uvb``) or with fixed draws of
    the old block (``uvb-is``).
    """
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    out = []
    for n in range(1, y.size + 1):
        rng = engines.update_rng(seed, n - 1)
        if n == 1:
            spec, lam0 = models.schools_init_lambda(y, sigma, 1)
            target = models.schools_target(1, y, sigma, hyperprior=first_prior)
            res = sga.run(spec, lam0, target, S, stop, rng)
        else:
            prev_spec, prev_lam = out[-1]
            spec, lam0 = models.schools_grow_lambda(prev_spec, prev_lam)
            if method == "uvb":
                target = models.schools_target(n, y, sigma, prev=(prev_spec, prev_lam))
                res = sga.run(spec, lam0, target, S, stop, rng)
            elif method == "uvb-is":
                ctx = models.schools_hybrid_context(prev_spec, prev_lam, y[n - 1], sigma[n - 1], S_is, rng)
                res = sga.run(spec, lam0, ctx.estimate, S_is, stop, rng)
            else:
                raise ValueError(f"unknown method {method!r}")
        out.append((spec, res.lam))
    return out


def schools_svb(y, sigma, S=engines.DEFAULT_S, seed=None, stop=sga.StopRule()):
    """One fit to all schools under the flat prior."""
    y = np.asarray(y, dtype=float)
    spec, lam0 = models.schools_init_lambda(y, sigma, y.size)
    res = sga.run(spec, lam0, models.schools_target(y.size, y, sigma), S, stop, seed)
    return spec, res.lam


def schools_oracle(y, sigma, chain: mcmc.ChainConfig, seed) -> np.ndarray:
    """Posterior draws for all schools, columns ``(mu, log tau, theta_1..theta_n)``.

    The chain runs on ``(mu, log tau, eta)`` with ``theta = mu + tau * eta``,
    which avoids the narrow neck at small ``tau``.
    """
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    d = 2 + y.size

    def target(x):
        return float(models.schools_noncentred_log_posterior(x[None, :], y, sigma)[0])

    x0 = np.concatenate([[y.mean(), np.log(y.std() + 1.0)], np.zeros(y.size)])
    cfg = mcmc.ChainConfig(chain.iterations, chain.burn_in, seed=seed, thin=chain.thin)
    x = mcmc.rwmh_sample(target, d, cfg, x0=x0).draws
    theta = x[:, :1] + np.exp(x[:, 1:2]) * x[:, 2:]
    return np.column_stack([x[:, :2], theta])


def schools_ordering(rep: int, seed, oracle: np.ndarray, settings: SchoolsSettings = SchoolsSettings()) -> ScoreTable:
    """KL from each method's final approximation to the oracle under one random school order.

    ``oracle`` holds posterior draws in the original school order. Rows:
    ``kl_joint`` and ``kl_margin:<name>`` with margins ``mu``, ``log_tau`` and
    the schools by original index.
    """
    table = ScoreTable()
    y = np.asarray(settings.y, dtype=float)
    sigma = np.asarray(settings.sigma, dtype=float)
    order = replication_rng(seed, rep, 0).permutation(y.size)
    inverse = np.argsort(order)
    n = y.size
    for method in settings.methods:
        start = time.perf_counter()
        if method == "svb":
            spec, lam = schools_svb(y[order], sigma[order], settings.S, replication_seed(seed, rep, 1), settings.stop)
        else:
            seq = schools_sequence(y[order], sigma[order], method, settings.S, settings.S_is,
                                   replication_seed(seed, rep, 1), settings.stop, settings.first_prior)
            spec, lam = seq[-1]
        draws = family.sample(spec, lam, settings.draws, replication_rng(seed, rep, 2)).draws
        # back to the original school order
        draws = np.column_stack([draws[:, :2], draws[:, 2:][:, inverse]])
        table.add(rep, method, 1, n, "kl_joint", knn_kl(draws, oracle))
        names = ["mu", "log_tau"] + [f"school{j + 1}" for j in range(n)]
        for c, name in enumerate(names):
            table.add(rep, method, 1, n, f"kl_margin:{name}", knn_kl(draws[:, c], oracle[:, c]))
        table.add_time(rep, method, 1, n, time.perf_counter() - start)
    return table


# ---------------------------------------------------------------------------
# DPM panel forecasting


@dataclass
class DPMSettings:
    N: int = 50
    T: int = 150
    schedule: tuple = DPM_SCHEDULE
    horizon: int = 50
    methods: tuple = ("uvb", "svb", "mfvb", "independent")
    S: int = engines.DEFAULT_S
    M: int = 100
    alpha: float = 1.0
    stop: sga.StopRule = field(default_factory=sga.StopRule)


def dpm_replication(rep: int, seed, settings: DPMSettings = DPMSettings()) -> ScoreTable:
    """Cumulative ``horizon``-step log scores per unit for each method at every boundary.

    Row ``mcls`` at boundary ``T_n`` is the mean over units of
    ``sum_{h=1..horizon} log q(y_{i, T_n + h})``.
    """
    table = ScoreTable()
    y, _ = dpm.dpm_simulate(settings.N, settings.T, seed=replication_rng(seed, rep, 0))
    if settings.schedule[-1] + settings.horizon > settings.T:
        raise ValueError("panel too short for the last boundary plus the horizon")
    cfg = dpm.DPMConfig(settings.N, settings.alpha)
    fit_seed = replication_seed(seed, rep, 1)
    for method in settings.methods:
        start = time.perf_counter()
        times, scores = [], []
        if method in ("uvb", "svb"):
            run = dpm.dpm_uvb_run if method == "uvb" else dpm.dpm_svb_run
            kwargs = dict(M=settings.M) if method == "uvb" else {}
            recs = run(y, settings.schedule, cfg, settings.S, fit_seed, settings.stop, **kwargs)
            for r in recs:
                snap = r.snapshot(cfg, settings.M, replication_seed(seed, rep, 3))
                table.extras.setdefault("snapshots", []).append(dict(snap, replication=rep, method=method, K=0))
                table.extras.setdefault("traces", []).extend(
                    dict(t, replication=rep, method=method, K=0, boundary=r.boundary) for t in r.trace)
                theta, k = dpm.joint_draws(r.state, cfg, settings.M, replication_rng(seed, rep, 2))
                scores.append(_unit_mean(lambda i, fut: dpm.dpm_predictive_logscore(theta, k, i, fut),
                                         y, r.boundary, settings))
                times.append(r.wall_time)
        elif method == "mfvb":
            for n, T_n in enumerate(settings.schedule):
                t0 = time.perf_counter()
                st = mfvb.mfvb_fit(y, T_n, seed=np.random.SeedSequence(fit_seed, spawn_key=(n,)))
                times.append(time.perf_counter() - t0)
                table.extras.setdefault("snapshots", []).append(
                    dict(json.loads(st.snapshot(T_n)), replication=rep, method=method, K=0))
                theta, k = mfvb.mfvb_draws(st, settings.M, replication_rng(seed, rep, 2))
                scores.append(_unit_mean(lambda i, fut: dpm.dpm_predictive_logscore(theta, k, i, fut),
                                         y, T_n, settings))
        elif method == "independent":
            for T_n in settings.schedule:
                t0 = time.perf_counter()
                scores.append(_unit_mean(
                    lambda i, fut: models.independent_predictive_logdensity(y[:T_n, i], fut),
                    y, T_n, settings))
                times.append(time.perf_counter() - t0)
        else:
            raise ValueError(f"unknown method {method!r}")
        for i, T_n in enumerate(settings.schedule):
            table.add(rep, method, 0, T_n, "mcls", scores[i])
            table.add_time(rep, method, 0, T_n, float(np.sum(times[: i + 1])))
        log.info("dpm rep=%d %s mcls=%s (%.1fs)", rep, method, np.round(scores, 3), time.perf_counter() - start)
    return table


def _unit_mean(score_fn, y, T_n, settings):
    fut = y[T_n : T_n + settings.horizon]
    return float(np.mean([np.sum(score_fn(i, fut[:, i])) for i in range(y.shape[1])]))
