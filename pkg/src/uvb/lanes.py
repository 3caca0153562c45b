"""Lane-centre geometry for vehicle trajectories.

Positions are converted to distance travelled along the road and signed
lateral deviation from a smoothed lane centre line. The centre line is a pair
of cubic smoothing splines ``f_x(d), f_y(d)`` in arc length ``d``; the
smoothing parameter of each is chosen by generalised cross-validation.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence

import numpy as np
from scipy import optimize
from scipy.interpolate import make_smoothing_spline

log = logging.getLogger(__name__)

TRAJECTORY_FIELDS = ("vehicle_id", "frame", "x", "y", "lane")
DEVIATION_FIELDS = ("vehicle_id", "frame", "lane", "x_star", "y_star", "at_boundary")
MIN_CENTRE_POINTS = 10


@dataclass
class Trajectory:
    vehicle_id: int
    frames: np.ndarray
    xy: np.ndarray
    lane: int

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float)
        self.frames = np.asarray(self.frames)
        if self.xy.ndim != 2 or self.xy.shape[1] != 2 or self.xy.shape[0] < 2:
            raise ValueError("trajectory needs at least two (x, y) points")
        if not np.all(np.isfinite(self.xy)):
            raise ValueError("trajectory has non-finite coordinates")


def path_distance(xy) -> np.ndarray:
    """Cumulative Euclidean distance travelled, starting at 0."""
    xy = np.asarray(xy, dtype=float)
    if xy.ndim != 2 or xy.shape[0] < 2:
        raise ValueError("need at least two points")
    steps = np.hypot(*np.diff(xy, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _frame(xy):
    """Origin and orthonormal axes fixed to the point cloud.

    The first axis points from the start to the end of the data and the second
    is its left-hand normal, so the frame moves rigidly with the scene.
    """
    origin = xy.mean(axis=0)
    u = xy[-1] - xy[0]
    norm = np.hypot(*u)
    if norm == 0:
        raise ValueError("centre line data has no extent")
    u = u / norm
    return origin, np.array([u, [-u[1], u[0]]])


@dataclass
class CentreLine:
    """Smoothed lane centre ``(f_x(d), f_y(d))`` on ``[d_min, d_max]``."""

    fx: object
    fy: object
    d_min: float
    d_max: float
    origin: np.ndarray
    axes: np.ndarray

    def point(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        local = np.stack([self.fx(d), self.fy(d)], axis=-1)
        return self.origin + local @ self.axes

    def tangent(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        local = np.stack([self.fx.derivative()(d), self.fy.derivative()(d)], axis=-1)
        return local @ self.axes


def fit_centre_line(points, distances, lam=None) -> CentreLine:
    """Fit ``x`` and ``y`` against arc length with independent smoothing splines.

    ``points`` are ``(n, 2)`` positions pooled from trajectories in one lane and
    ``distances`` their distance travelled. Points sharing a distance are
    averaged. The splines are fitted in a frame attached to the data, which
    makes the fitted curve move rigidly with the scene.
    """
    points = np.asarray(points, dtype=float)
    d = np.asarray(distances, dtype=float)
    if points.shape != (d.size, 2):
        raise ValueError("points must be (n, 2) matching distances")
    order = np.argsort(d, kind="stable")
    d, points = d[order], points[order]
    uniq, inv = np.unique(d, return_inverse=True)
    if uniq.size < MIN_CENTRE_POINTS:
        raise ValueError(f"need at least {MIN_CENTRE_POINTS} distinct arc lengths, got {uniq.size}")
    counts = np.bincount(inv)
    mean_pts = np.column_stack([np.bincount(inv, points[:, c]) / counts for c in range(2)])
    origin, axes = _frame(mean_pts)
    local = (mean_pts - origin) @ axes.T
    fx = make_smoothing_spline(uniq, local[:, 0], lam=lam)
    fy = make_smoothing_spline(uniq, local[:, 1], lam=lam)
    return CentreLine(fx, fy, float(uniq[0]), float(uniq[-1]), origin, axes)


@dataclass
class Deviation:
    x_star: float
    y_star: float
    at_boundary: bool
    nearest: np.ndarray


def lateral_deviation(point, centre: CentreLine, grid: int = 400, margin: float = 0.0) -> Deviation:
    """Project ``point`` onto the centre line and return ``(x*, y*)``.

    ``x*`` is the arc length of the nearest curve point and ``|y*|`` the
    distance to it. ``y*`` is negative when the point lies to the left of the
    direction of travel and positive to the right. The nearest point is found
    on a coarse grid and refined by golden-section search; ``at_boundary`` is
    set when it falls at an end of the (margin-extended) domain.
    """
    p = np.asarray(point, dtype=float).reshape(2)
    lo, hi = centre.d_min - margin, centre.d_max + margin
    ds = np.linspace(lo, hi, grid)

    def dist2(s):
        c = centre.point(s)
        return float(np.sum((c - p) ** 2))

    pts = centre.point(ds)
    j = int(np.argmin(np.sum((pts - p) ** 2, axis=1)))
    at_boundary = j == 0 or j == grid - 1
    if at_boundary:
        d_hat = ds[j]
    else:
        a, b, c = ds[j - 1], ds[j], ds[j + 1]
        try:
            d_hat = float(optimize.golden(dist2, brack=(a, b, c), tol=1e-12))
        except (ValueError, RuntimeError):
            d_hat = b
        d_hat = min(max(d_hat, lo), hi)
        if d_hat <= lo or d_hat >= hi:
            at_boundary = True
    nearest = centre.point(d_hat)
    off = p - nearest
    t = centre.tangent(d_hat)
    cross = t[0] * off[1] - t[1] * off[0]
    sign = -1.0 if cross > 0 else 1.0
    return Deviation(float(d_hat), sign * float(np.hypot(*off)), bool(at_boundary), nearest)


# ---------------------------------------------------------------------------
# Trajectory CSV ingestion and panel output


def read_trajectories(path) -> List[Trajectory]:
    """Read ``vehicle_id, frame, x, y, lane`` rows into per-vehicle trajectories.

    Rows are ordered by frame; a vehicle's lane is its most frequent lane.
    """
    by_vehicle: Dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRAJECTORY_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                rec = (int(row["frame"]), float(row["x"]), float(row["y"]), int(row["lane"]))
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
            by_vehicle.setdefault(int(row["vehicle_id"]), []).append(rec)
    out = []
    for vid in sorted(by_vehicle):
        rows = sorted(by_vehicle[vid])
        if len(rows) < 2:
            log.warning("vehicle %d has fewer than two points; skipped", vid)
            continue
        arr = np.array(rows, dtype=float)
        lanes, counts = np.unique(arr[:, 3].astype(int), return_counts=True)
        out.append(Trajectory(vid, arr[:, 0].astype(int), arr[:, 1:3], int(lanes[np.argmax(counts)])))
    return out


def fit_lane_centres(trajectories: Sequence[Trajectory]) -> Dict[int, CentreLine]:
    """One centre line per lane from the pooled trajectories assigned to it."""
    pooled: Dict[int, list] = {}
    for tr in trajectories:
        pooled.setdefault(tr.lane, []).append((tr.xy, path_distance(tr.xy)))
    out = {}
    for lane, parts in sorted(pooled.items()):
        pts = np.concatenate([p for p, _ in parts])
        d = np.concatenate([dd for _, dd in parts])
        out[lane] = fit_centre_line(pts, d)
    return out


def trajectory_deviations(traj: Trajectory, centre: CentreLine) -> List[Deviation]:
    return [lateral_deviation(p, centre) for p in traj.xy]


def deviation_panel(trajectories: Sequence[Trajectory], centres: Dict[int, CentreLine], T: int):
    """``(T, N)`` panel of lateral deviations over each vehicle's first ``T`` steps.

    Vehicles with fewer than ``T`` points are dropped. Returns the panel and
    the retained vehicle ids.
    """
    cols, ids = [], []
    for tr in trajectories:
        if tr.xy.shape[0] < T:
            continue
        devs = [lateral_deviation(p, centres[tr.lane]).y_star for p in tr.xy[:T]]
        cols.append(devs)
        ids.append(tr.vehicle_id)
    if not cols:
        raise ValueError(f"no trajectory has {T} points")
    return np.array(cols).T, ids


def write_deviations(path, trajectories: Iterable[Trajectory], centres: Dict[int, CentreLine]) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEVIATION_FIELDS)
        for tr in trajectories:
            for f, dev in zip(tr.frames, trajectory_deviations(tr, centres[tr.lane])):
                w.writerow([tr.vehicle_id, int(f), tr.lane, repr(dev.x_star), repr(dev.y_star), int(dev.at_boundary)])
                n += 1
    return n
