"""Trajectory smoothing: natural cubic spline, uniform arc-length resampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

N_TRACE_POINTS = 6
DENSE_SAMPLES = 8192


class TrajectoryError(ValueError):
    pass


@dataclass
class TrajectoryTrace:
    points: np.ndarray      # raw input points (N, 2)
    resampled: np.ndarray   # exactly 6 points at uniform arc-length fractions


def fit_spline(points: np.ndarray) -> tuple[CubicSpline, float]:
    """Natural cubic spline through the points, parameterized by chord length."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise TrajectoryError(f"expected (N,2) points, got {points.shape}")
    keep = [0]
    for i in range(1, len(points)):
        if not np.array_equal(points[i], points[keep[-1]]):
            keep.append(i)
    points = points[keep]
    if len(points) < 4:
        raise TrajectoryError(f"need >= 4 distinct points, got {len(points)}")
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(s[-1])
    if total <= 0.0:
        raise TrajectoryError("zero total length")
    return CubicSpline(s, points, bc_type="natural"), total


def resample_trajectory(points: np.ndarray, n_points: int = N_TRACE_POINTS) -> TrajectoryTrace:
    """Six points at arc-length fractions {0, .2, .4, .6, .8, 1} of the spline.

    Arc length is measured on a dense polyline over the fitted curve
    (DENSE_SAMPLES segments); endpoints are returned exactly.
    """
    spline, s_max = fit_spline(points)
    u = np.linspace(0.0, s_max, DENSE_SAMPLES + 1)
    dense = spline(u)
    lengths = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    fractions = np.linspace(0.0, 1.0, n_points)
    u_at = np.interp(fractions * lengths[-1], lengths, u)
    resampled = spline(u_at)
    resampled[0] = dense[0]
    resampled[-1] = dense[-1]
    raw = np.asarray(points, dtype=np.float64)
    return TrajectoryTrace(points=raw, resampled=resampled)


def arc_lengths_between(trace: TrajectoryTrace, dense_samples: int = 10000) -> np.ndarray:
    """Arc length of the fitted spline between consecutive resampled points.

    Independent dense-integration oracle used by the uniformity checks.
    """
    spline, s_max = fit_spline(trace.points)
    u = np.linspace(0.0, s_max, dense_samples + 1)
    dense = spline(u)
    lengths = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    # locate each resampled point's parameter by nearest dense point
    out = []
    params = []
    for p in trace.resampled:
        d = np.linalg.norm(dense - p[None], axis=1)
        params.append(u[int(d.argmin())])
    for a, b in zip(params[:-1], params[1:]):
        la = np.interp(a, u, lengths)
        lb = np.interp(b, u, lengths)
        out.append(lb - la)
    return np.asarray(out)
