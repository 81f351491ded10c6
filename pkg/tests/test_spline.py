import numpy as np
import pytest

from gensup.rng import RngStream
from gensup.spline import TrajectoryError, arc_lengths_between, resample_trajectory


def test_collinear_input_resamples_to_exact_fifths():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [4.0, 0.0], [7.5, 0.0], [10.0, 0.0]])
    trace = resample_trajectory(pts)
    expected = np.array([[0, 0], [2, 0], [4, 0], [6, 0], [8, 0], [10, 0]], dtype=float)
    assert np.allclose(trace.resampled, expected, atol=1e-8)


def test_endpoints_exact_for_random_smooth_curves():
    rng = RngStream(0, "s")
    for k in range(10):
        t = np.linspace(0, 1, 8)
        pts = np.stack([t * 10 + rng.normal((8,)) * 0.5,
                        np.sin(t * 3) * 4 + rng.normal((8,)) * 0.5], axis=1)
        trace = resample_trajectory(pts)
        assert np.allclose(trace.resampled[0], pts[0], atol=1e-9)
        assert np.allclose(trace.resampled[-1], pts[-1], atol=1e-9)
        assert trace.resampled.shape == (6, 2)


def test_arc_length_uniformity_within_one_percent():
    rng = RngStream(1, "s")
    worst = 0.0
    for k in range(10):
        t = np.linspace(0, 1, 10)
        pts = np.stack([t * 20, np.cos(t * 4) * 6 + rng.normal((10,))], axis=1)
        trace = resample_trajectory(pts)
        arcs = arc_lengths_between(trace)
        dev = np.abs(arcs - arcs.mean()).max() / arcs.mean()
        worst = max(worst, float(dev))
    assert worst < 0.01, worst


def test_consecutive_duplicates_are_collapsed():
    pts = np.array([[0, 0], [0, 0], [1, 0], [2, 1], [3, 1], [4, 0]], dtype=float)
    trace = resample_trajectory(pts)
    assert trace.resampled.shape == (6, 2)


def test_too_few_distinct_points_raises():
    with pytest.raises(TrajectoryError):
        resample_trajectory(np.array([[0, 0], [1, 1], [1, 1], [2, 2]], dtype=float))
    with pytest.raises(TrajectoryError):
        resample_trajectory(np.zeros((5, 2)))


def test_bad_shape_raises():
    with pytest.raises(TrajectoryError):
        resample_trajectory(np.zeros((5, 3)))
