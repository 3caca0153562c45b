"""Mixtures of multivariate normals used as approximating densities.

Parameter layout for a family with ``K`` components in ``d`` dimensions::

    [mean_1 (d), tril_1 (d(d+1)/2), ..., mean_K, tril_K, logits (K)]

``tril_k`` holds the lower triangle of the scale factor ``L_k`` (so that
``Sigma_k = L_k L_k^T``) in ``np.tril_indices`` order, with the diagonal
entries stored on the log scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dtrtrs

LOG_2PI = np.log(2.0 * np.pi)


class InvalidParameterError(ValueError):
    """Raised for non-finite or malformed auxiliary parameter vectors."""


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class FamilySpec:
    dim: int
    components: int = 1

    def __post_init__(self):
        if self.dim < 1 or self.components < 1:
            raise ValueError(f"invalid family spec {self}")

    @property
    def n_tril(self) -> int:
        return self.dim * (self.dim + 1) // 2

    @property
    def block(self) -> int:
        return self.dim + self.n_tril

    @property
    def n_params(self) -> int:
        return self.components * self.block + self.components

    def mean_slice(self, k: int = 0) -> slice:
        start = k * self.block
        return slice(start, start + self.dim)

    def tril_slice(self, k: int = 0) -> slice:
        start = k * self.block + self.dim
        return slice(start, start + self.n_tril)

    @property
    def logit_slice(self) -> slice:
        return slice(self.components * self.block, self.n_params)


@dataclass
class DrawBatch:
    draws: np.ndarray
    log_q: np.ndarray
    cached_loglik: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None

    def __len__(self):
        return self.draws.shape[0]


def logsumexp(a, axis=None):
    """Plain-numpy log-sum-exp; -inf everywhere gives -inf."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())[()]


@lru_cache(maxsize=None)
def _tril_index(d):
    rows, cols = np.tril_indices(d)
    return rows, cols, np.flatnonzero(rows == cols)


def check_lambda(spec: FamilySpec, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (spec.n_params,):
        raise InvalidParameterError(
            f"expected {spec.n_params} parameters for {spec}, got shape {lam.shape}"
        )
    if not np.all(np.isfinite(lam)):
        raise InvalidParameterError("non-finite auxiliary parameters")
    return lam


def unpack(spec: FamilySpec, lam):
    """Return ``(means (K,d), factors (K,d,d), log_weights (K,))``."""
    lam = check_lambda(spec, lam)
    d, K = spec.dim, spec.components
    rows, cols, diag = _tril_index(d)
    n_tril = rows.size
    block = lam[: K * (d + n_tril)].reshape(K, d + n_tril)
    means = block[:, :d].copy()
    vals = block[:, d:].copy()
    vals[:, diag] = np.exp(vals[:, diag])
    factors = np.zeros((K, d, d))
    factors[:, rows, cols] = vals
    if K == 1:
        return means, factors, np.zeros(1)
    logits = lam[spec.logit_slice]
    return means, factors, logits - logsumexp(logits)


def pack(spec: FamilySpec, means, factors, weights=None) -> np.ndarray:
    """Inverse of :func:`unpack`; ``weights`` are probabilities (default equal)."""
    d, K = spec.dim, spec.components
    means = np.asarray(means, dtype=float).reshape(K, d)
    factors = np.asarray(factors, dtype=float).reshape(K, d, d)
    rows, cols, diag = _tril_index(d)
    lam = np.empty(spec.n_params)
    for k in range(K):
        lam[spec.mean_slice(k)] = means[k]
        vals = factors[k, rows, cols].copy()
        if np.any(vals[diag] <= 0):
            raise InvalidParameterError("scale factor diagonal must be positive")
        vals[diag] = np.log(vals[diag])
        lam[spec.tril_slice(k)] = vals
    if weights is None:
        lam[spec.logit_slice] = 0.0
    else:
        lam[spec.logit_slice] = np.log(np.asarray(weights, dtype=float))
    return lam


def initial_lambda(spec: FamilySpec, mean=None, scale=1.0, spread=0.5, rng=None):
    """Starting point: equal weights, diagonal scale, component means jittered."""
    d, K = spec.dim, spec.components
    centre = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (d,))
    means = np.tile(centre, (K, 1))
    if K > 1:
        rng = as_rng(rng)
        means = means + spread * scale * rng.standard_normal((K, d))
    factors = np.tile(np.diag(scale), (K, 1, 1))
    return pack(spec, means, factors)


def _as_points(spec, theta):
    theta = np.asarray(theta, dtype=float)
    single = theta.ndim == 1
    theta = np.atleast_2d(theta)
    if theta.shape[1] != spec.dim:
        raise ValueError(f"point dimension {theta.shape[1]} != family dimension {spec.dim}")
    return theta, single


def _tri_solve(L, b, trans=0):
    """``L^-1 b`` (or ``L^-T b`` with ``trans=1``) for lower-triangular ``L``."""
    x, info = dtrtrs(L, b, lower=1, trans=trans)
    if info != 0:
        raise InvalidParameterError("singular scale factor")
    return x


def _component_terms(spec, means, factors, theta):
    # per-component log densities (K,S) plus whitened residuals u = L^-1 (theta - mu)
    K, S = spec.components, theta.shape[0]
    logn = np.empty((K, S))
    us = []
    for k in range(K):
        r = (theta - means[k]).T
        u = _tri_solve(factors[k], r)
        logdet = np.sum(np.log(np.diag(factors[k])))
        logn[k] = -0.5 * spec.dim * LOG_2PI - logdet - 0.5 * np.sum(u * u, axis=0)
        us.append(u)
    return logn, us


def _mix(logn, logw):
    if logn.shape[0] == 1:
        return logn[0]
    return logsumexp(logn + logw[:, None], axis=0)


def log_density(spec: FamilySpec, lam, theta):
    """Mixture log density at one point ``(d,)`` or a batch ``(S, d)``."""
    means, factors, logw = unpack(spec, lam)
    theta, single = _as_points(spec, theta)
    logn, _ = _component_terms(spec, means, factors, theta)
    out = _mix(logn, logw)
    return out[0] if single else out


def log_density_and_score(spec: FamilySpec, lam, theta, params=None):
    """Log density and its gradient with respect to the parameter vector."""
    means, factors, logw = unpack(spec, lam) if params is None else params
    theta, single = _as_points(spec, theta)
    d, K, S = spec.dim, spec.components, theta.shape[0]
    rows, cols, diag = _tril_index(d)
    logn, us = _component_terms(spec, means, factors, theta)
    logq = _mix(logn, logw)
    resp = np.ones((1, S)) if K == 1 else np.exp(logn + logw[:, None] - logq)

    grad = np.empty((S, spec.n_params))
    for k in range(K):
        u = us[k]
        v = _tri_solve(factors[k], u, trans=1)
        g_tril = v[rows].T * u[cols].T
        g_tril[:, diag] = g_tril[:, diag] * np.diag(factors[k]) - 1.0
        grad[:, spec.mean_slice(k)] = resp[k][:, None] * v.T
        grad[:, spec.tril_slice(k)] = resp[k][:, None] * g_tril
    grad[:, spec.logit_slice] = resp.T - np.exp(logw)
    if single:
        return logq[0], grad[0]
    return logq, grad


def score(spec: FamilySpec, lam, theta):
    return log_density_and_score(spec, lam, theta)[1]


def sample(spec: FamilySpec, lam, S: int, seed=None) -> DrawBatch:
    """Draw ``S`` points; the same seed always gives the same batch."""
    params = unpack(spec, lam)
    draws = draw_points(spec, params, S, seed)
    logn, _ = _component_terms(spec, params[0], params[1], draws)
    return DrawBatch(draws=draws, log_q=_mix(logn, params[2]))


def draw_points(spec: FamilySpec, params, S: int, seed=None) -> np.ndarray:
    """Raw draws from unpacked parameters (no density evaluation)."""
    if S < 1:
        raise ValueError("S must be at least 1")
    means, factors, logw = params
    rng = as_rng(seed)
    if spec.components == 1:
        comp = np.zeros(S, dtype=int)
    else:
        comp = np.searchsorted(np.cumsum(np.exp(logw)), rng.random(S), side="right")
        comp = np.minimum(comp, spec.components - 1)
    z = rng.standard_normal((S, spec.dim))
    if spec.components == 1:
        return means[0] + z @ factors[0].T
    return means[comp] + np.einsum("sij,sj->si", factors[comp], z)


def moments(spec: FamilySpec, lam):
    """Mixture mean and covariance."""
    means, factors, logw = unpack(spec, lam)
    w = np.exp(logw)
    mean = w @ means
    cov = np.zeros((spec.dim, spec.dim))
    for k in range(spec.components):
        diff = means[k] - mean
        cov += w[k] * (factors[k] @ factors[k].T + np.outer(diff, diff))
    return mean, cov


def conditional_slice(spec: FamilySpec, lam, fixed: Sequence[int], values):
    """Gaussian conditional of the free coordinates given ``theta[fixed] = values``.

    Only defined for single-component families. Returns ``(spec, lam)`` of the
    free block, in increasing coordinate order.
    """
    if spec.components != 1:
        raise ValueError("conditional_slice needs a single-component family")
    fixed = np.asarray(sorted(set(int(i) for i in fixed)), dtype=int)
    if fixed.size and (fixed.min() < 0 or fixed.max() >= spec.dim):
        raise IndexError("fixed index out of range")
    free = np.setdiff1d(np.arange(spec.dim), fixed)
    if free.size == 0:
        raise ValueError("nothing left to condition")
    mean, cov = moments(spec, lam)
    if fixed.size == 0:
        return spec, check_lambda(spec, lam).copy()
    values = np.asarray(values, dtype=float).reshape(fixed.size)
    s_ff = cov[np.ix_(free, free)]
    s_fg = cov[np.ix_(free, fixed)]
    s_gg = cov[np.ix_(fixed, fixed)]
    chol_gg = np.linalg.cholesky(s_gg)
    # gain = S_fg S_gg^-1 via two triangular solves
    tmp = solve_triangular(chol_gg, s_fg.T, lower=True)
    gain = solve_triangular(chol_gg.T, tmp, lower=False).T
    cmean = mean[free] + gain @ (values - mean[fixed])
    ccov = s_ff - gain @ s_fg.T
    ccov = 0.5 * (ccov + ccov.T)
    sub = FamilySpec(free.size, 1)
    return sub, pack(sub, cmean, np.linalg.cholesky(ccov))


def dumps(spec: FamilySpec, lam) -> str:
    """JSON record ``{"dim", "components", "lambda"}``; floats round-trip exactly."""
    lam = check_lambda(spec, lam)
    return json.dumps(
        {"dim": spec.dim, "components": spec.components, "lambda": [float(x) for x in lam]}
    )


def loads(text: str):
    obj = json.loads(text) if isinstance(text, str) else text
    spec = FamilySpec(int(obj["dim"]), int(obj["components"]))
    return spec, check_lambda(spec, np.array(obj["lambda"], dtype=float))
