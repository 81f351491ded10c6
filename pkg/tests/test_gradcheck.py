import pytest
import torch

from gensup.gradcheck import NonFiniteLossError, grad_check
from gensup.params import ModelState, ParamGroup


def quad_state():
    state = ModelState()
    state.add_group(ParamGroup("backbone", {"w": torch.randn(5).requires_grad_(True)}))
    return state


def quad_loss(state):
    w = state.groups["backbone"].tensors["w"]
    return 0.5 * (w ** 2).sum()


def test_quadratic_passes_at_1e8():
    report = grad_check(quad_loss, quad_state(), tolerance=1e-8)
    assert report.passed, report.summary()
    assert set(report.deviations) == {"backbone/w"}


def test_wrong_gradient_fails():
    state = quad_state()

    def biased(state):
        w = state.groups["backbone"].tensors["w"]
        # analytic grad of this is 3*w, finite differences will see it;
        # compare against a deliberately detached mismatch instead
        return 0.5 * (w ** 2).sum() + (w.detach() * w).sum()

    # loss = .5 w^2 + w_detached*w: autograd sees d/dw = w + w_det = 2w,
    # finite differences see d/dw of (.5w^2 + w*w) = 3w -> mismatch
    report = grad_check(biased, state, tolerance=1e-4)
    assert not report.passed


def test_frozen_group_omitted():
    state = quad_state()
    state.add_group(ParamGroup("connector", {"u": torch.randn(3)}, frozen=True))
    report = grad_check(quad_loss, state, tolerance=1e-8)
    assert "connector/u" not in report.deviations


def test_restores_float32_data():
    state = quad_state()
    before = state.groups["backbone"].tensors["w"].detach().clone()
    grad_check(quad_loss, state, tolerance=1e-6)
    after = state.groups["backbone"].tensors["w"]
    assert after.dtype == torch.float32
    assert torch.equal(after, before)


def test_nonfinite_loss_raises():
    state = quad_state()

    def bad(state):
        w = state.groups["backbone"].tensors["w"]
        return (w / 0.0).sum()

    with pytest.raises(NonFiniteLossError):
        grad_check(bad, state)
