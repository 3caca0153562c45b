"""Forecast scores, sample-based KL divergence, runtime ratios and gradient-variance summaries."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

SCORE_FIELDS = ("replication", "method", "K", "boundary", "metric", "value")


def cumulative_log_score(scores) -> np.ndarray:
    """Running sums of per-boundary log scores; warns if any entry is not finite."""
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        warnings.warn("log score contains non-finite entries", RuntimeWarning)
    return np.cumsum(scores)


def mean_cumulative_log_score(cls_by_replication) -> np.ndarray:
    """Mean over replications (rows) of cumulative log scores."""
    return np.mean(np.atleast_2d(np.asarray(cls_by_replication, dtype=float)), axis=0)


def _kth_positive(dist, k):
    """Per row, the k-th smallest strictly positive distance (inf if none)."""
    out = np.full(dist.shape[0], np.inf)
    for i, row in enumerate(dist):
        pos = row[row > 0]
        if pos.size >= k:
            out[i] = np.partition(pos, k - 1)[k - 1]
    return out


def knn_kl(samples_p, samples_q, k: int = 1, clip: bool = True) -> float:
    """Nearest-neighbour estimate of ``KL(p || q)`` from samples of each.

    Uses the k-th neighbour distance of every ``p`` point within ``p`` (itself
    excluded) and within ``q``. Zero distances from duplicated points fall back
    to the next neighbour with a positive distance. Negative estimates are
    clipped to 0 unless ``clip=False``.
    """
    p = np.asarray(samples_p, dtype=float)
    q = np.asarray(samples_q, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    if q.ndim == 1:
        q = q[:, None]
    if p.shape[1] != q.shape[1]:
        raise ValueError("sample sets have different dimensions")
    n, d = p.shape
    m = q.shape[0]
    if n < 2 or m < 1:
        raise ValueError("need at least two p samples and one q sample")
    tree_p = cKDTree(p)
    tree_q = cKDTree(q)
    rho, _ = tree_p.query(p, k=k + 1)
    rho = np.atleast_2d(rho.T).T[:, k]
    nu, _ = tree_q.query(p, k=k)
    nu = nu if k == 1 else nu[:, k - 1]
    for name, dist, tree, extra in (("rho", rho, tree_p, 1), ("nu", nu, tree_q, 0)):
        bad = ~(dist > 0)
        if np.any(bad):
            width = min(tree.n, k + extra + 32)
            full, _ = tree.query(p[bad], k=width)
            full = np.atleast_2d(full)
            if name == "rho":
                full = full[:, 1:]
            dist[bad] = _kth_positive(full, k)
    ok = np.isfinite(rho) & np.isfinite(nu)
    if not np.all(ok):
        log.warning("dropping %d points with no positive-distance neighbour", int(np.sum(~ok)))
    if not np.any(ok):
        return 0.0 if clip else float("nan")
    est = d * np.mean(np.log(nu[ok] / rho[ok])) + np.log(m / (n - 1.0))
    return max(float(est), 0.0) if clip else float(est)


def rcmr(wall_times, reference: float) -> np.ndarray:
    """Cumulative wall time divided by ``reference``.

    ``wall_times`` is ``(boundaries,)`` or ``(replications, boundaries)``; the
    cumulative times are averaged over replications first.
    """
    if not reference > 0:
        raise ValueError("reference time must be positive")
    t = np.atleast_2d(np.asarray(wall_times, dtype=float))
    return np.mean(np.cumsum(t, axis=1), axis=0) / reference


def gradient_variance_trace(traces: Sequence[Sequence[float]], length: Optional[int] = None) -> np.ndarray:
    """Per-iteration median across traces, truncated to the shortest trace."""
    if not traces:
        raise ValueError("need at least one trace")
    n = min(len(t) for t in traces)
    if length is not None:
        n = min(n, length)
    return np.median(np.array([np.asarray(t[:n], dtype=float) for t in traces]), axis=0)


def classification_accuracy_mean(accuracies) -> float:
    """Mean classification accuracy over replications."""
    return float(np.mean(np.asarray(accuracies, dtype=float)))


@dataclass
class ScoreTable:
    """Tidy metric rows; wall times are kept apart so metric files are reproducible."""

    rows: List[dict] = field(default_factory=list)
    timings: List[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict, repr=False)

    def extend(self, other: "ScoreTable") -> "ScoreTable":
        self.rows.extend(other.rows)
        self.timings.extend(other.timings)
        for key, val in other.extras.items():
            if isinstance(val, list):
                self.extras.setdefault(key, []).extend(val)
            else:
                self.extras.setdefault(key, []).append(val)
        return self

    def add(self, replication, method, K, boundary, metric, value):
        self.rows.append(
            dict(replication=int(replication), method=str(method), K=int(K),
                 boundary=int(boundary), metric=str(metric), value=float(value))
        )

    def add_time(self, replication, method, K, boundary, cum_wall_time):
        self.timings.append(
            dict(replication=int(replication), method=str(method), K=int(K),
                 boundary=int(boundary), cum_wall_time=float(cum_wall_time))
        )

    def check(self) -> "ScoreTable":
        last: Dict[tuple, int] = {}
        for r in self.rows:
            key = (r["replication"], r["method"], r["K"], r["metric"])
            if key in last and r["boundary"] <= last[key]:
                raise ValueError(f"boundaries not increasing for {key}")
            last[key] = r["boundary"]
        return self

    def select(self, **match) -> List[dict]:
        return [r for r in self.rows if all(r[k] == v for k, v in match.items())]

    def values(self, **match) -> np.ndarray:
        return np.array([r["value"] for r in self.select(**match)])

    def to_csv(self, stream=None) -> str:
        out = io.StringIO() if stream is None else stream
        w = csv.DictWriter(out, fieldnames=SCORE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in sorted(self.rows, key=lambda r: (r["metric"], r["method"], r["K"], r["replication"], r["boundary"])):
            w.writerow({**r, "value": repr(r["value"])})
        return out.getvalue() if stream is None else ""

    def timing_csv(self) -> str:
        out = io.StringIO()
        fields = ("replication", "method", "K", "boundary", "cum_wall_time")
        w = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in self.timings:
            w.writerow(r)
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScoreTable":
        t = cls()
        for r in csv.DictReader(io.StringIO(text)):
            t.add(r["replication"], r["method"], r["K"], r["boundary"], r["metric"], float(r["value"]))
        return t


def summary_markdown(table: ScoreTable, title: str = "Summary") -> str:
    """Mean of each metric per (method, K) at every boundary, as a Markdown table."""
    groups: Dict[tuple, Dict[int, list]] = {}
    for r in table.rows:
        groups.setdefault((r["metric"], r["method"], r["K"]), {}).setdefault(r["boundary"], []).append(r["value"])
    lines = [f"# {title}", "", "| metric | method | K | boundary | mean | replications |", "|---|---|---|---|---|---|"]
    for (metric, method, K), by_b in sorted(groups.items()):
        for b, vals in sorted(by_b.items()):
            lines.append(f"| {metric} | {method} | {K} | {b} | {np.mean(vals):.4f} | {len(vals)} |")
    return "\n".join(lines) + "\n"
