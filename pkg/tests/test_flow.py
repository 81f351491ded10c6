import pytest
import torch
from hypothesis import given, settings, strategies as st

from gensup.flow import (denormalize_from_unit, euler_integrate, flow_interpolate, flow_mse,
                         normalize_to_unit)
from gensup.rng import RngStream


@settings(deadline=None, max_examples=50)
@given(t=st.floats(0.0, 1.0), seed=st.integers(0, 10_000))
def test_path_identities(t, seed):
    rng = RngStream(seed, "flow")
    target = rng.torch_normal((8, 8))
    fs = flow_interpolate(target, t, rng=rng.child("eps"))
    x0 = (1.0 - 0.0) * fs.noise + 0.0 * target
    x1 = (1.0 - 1.0) * fs.noise + 1.0 * target
    assert torch.allclose(x0, fs.noise, atol=1e-6)
    assert torch.allclose(x1, target, atol=1e-6)
    recon = fs.x_t + (1.0 - t) * fs.target_velocity
    assert torch.allclose(recon, target, atol=1e-6)


def test_path_endpoints_exact():
    rng = RngStream(0, "f")
    d = rng.torch_normal((4, 4))
    eps = rng.torch_normal((4, 4))
    assert torch.equal(flow_interpolate(d, 0.0, noise=eps).x_t, eps)
    assert torch.equal(flow_interpolate(d, 1.0, noise=eps).x_t, d)


def test_degenerate_target_equals_noise():
    d = torch.full((3, 3), 0.7)
    for t in (0.0, 0.3, 1.0):
        fs = flow_interpolate(d, t, noise=d.clone())
        assert torch.allclose(fs.x_t, d, atol=1e-7)
        assert torch.all(fs.target_velocity == 0)


def test_midpoint_formula():
    d = torch.ones(2, 2)
    eps = -torch.ones(2, 2)
    fs = flow_interpolate(d, 0.5, noise=eps)
    assert torch.all(fs.x_t == 0)
    assert torch.all(fs.target_velocity == 2.0)


def test_t_out_of_range_raises():
    d = torch.zeros(2, 2)
    with pytest.raises(ValueError):
        flow_interpolate(d, -0.1, noise=d)
    with pytest.raises(ValueError):
        flow_interpolate(d, 1.1, noise=d)


def test_flow_mse_perfect_and_offset():
    v = RngStream(1, "v").torch_normal((4, 4))
    assert float(flow_mse(v, v)) == 0.0
    assert float(flow_mse(v + 0.1, v)) == pytest.approx(0.01, rel=1e-4)


def test_flow_mse_shape_mismatch():
    with pytest.raises(ValueError):
        flow_mse(torch.zeros(2, 2), torch.zeros(3, 3))


@settings(deadline=None, max_examples=30)
@given(seed=st.integers(0, 1000))
def test_flow_mse_nonnegative_zero_iff_equal(seed):
    rng = RngStream(seed, "m")
    a = rng.torch_normal((3, 3))
    b = rng.torch_normal((3, 3))
    assert float(flow_mse(a, b)) >= 0.0
    if not torch.equal(a, b):
        assert float(flow_mse(a, b)) > 0.0


def test_flow_mse_sample_weights():
    pred = torch.zeros(2, 4)
    tgt = torch.ones(2, 4)
    w = torch.tensor([1.0, 0.0])
    assert float(flow_mse(pred, tgt, w)) == pytest.approx(1.0)
    assert float(flow_mse(pred, tgt, torch.zeros(2))) == 0.0


def test_zero_predictor_monte_carlo_matches_analytic():
    # E ||d - eps||^2 / N = mean(d^2) + 1
    d = RngStream(5, "d").torch_normal((32, 32)).clamp(-1, 1)
    rng = RngStream(6, "mc")
    n = 10_000
    eps = rng.torch_normal((n, 32, 32))
    losses = ((d.unsqueeze(0) - eps) ** 2).mean(dim=(1, 2))
    mc = float(losses.mean())
    analytic = float((d ** 2).mean()) + 1.0
    assert abs(mc - analytic) / analytic < 0.02


def test_euler_exact_on_constant_field():
    x0 = torch.zeros(3)
    out = euler_integrate(lambda x, t: torch.ones(3), x0, steps=7)
    assert torch.allclose(out, torch.ones(3), atol=1e-6)


def test_euler_rejects_zero_steps():
    with pytest.raises(ValueError):
        euler_integrate(lambda x, t: x, torch.zeros(1), steps=0)


@settings(deadline=None, max_examples=50)
@given(lo=st.floats(-100, 100), span=st.floats(1e-3, 100), seed=st.integers(0, 100))
def test_normalize_round_trip(lo, span, seed):
    hi = lo + span
    x = RngStream(seed, "n").torch_uniform((5,), lo, hi, dtype=torch.float64)
    back = denormalize_from_unit(normalize_to_unit(x, lo, hi), lo, hi)
    assert torch.allclose(back, x, atol=1e-6 * max(1.0, abs(lo), abs(hi)))


def test_normalize_rejects_degenerate_range():
    with pytest.raises(ValueError):
        normalize_to_unit(torch.zeros(2), 1.0, 1.0)
    with pytest.raises(ValueError):
        denormalize_from_unit(torch.zeros(2), 2.0, 1.0)
