import numpy as np
import pytest

from gensup.model import JointModel, desk_model_config
from gensup.optim import OptimizerConfig
from gensup.params import group_hash
from gensup.rng import RngStream
from gensup.vla import (build_vla_data, heldout_action_mse, rollout_policy, vla_train_step,
                        _batch)


@pytest.fixture(scope="module")
def vla_data(vocab):
    return build_vla_data(6, seed=0, horizon=8, vocab=vocab)


def test_build_vla_data_shapes_and_padding(vla_data):
    assert vla_data.images.shape[1:] == (64, 64, 3)
    assert vla_data.chunks.shape[1:] == (8, 3)
    assert vla_data.depth_norm.shape[1:] == (32, 32)
    assert vla_data.n_items == len(vla_data.tokens)
    # tail chunks are padded with zero motion and open gripper
    last = vla_data.chunks[-1]
    assert float(last[-1, 2]) == -1.0
    assert vla_data.chunks.abs().max() <= 1.0


def small_vla_model(vocab):
    model = JointModel(desk_model_config(len(vocab), with_expert=True, dim=32,
                                         layers=2, heads=2))
    model.init_parameters(0)
    return model, model.build_state()


def test_vla_train_step_joint_composition(vocab, vla_data):
    model, state = small_vla_model(vocab)
    state.set_trainable(("backbone", "connector", "depth_head", "action_expert"))
    opt = OptimizerConfig(peak_lr=1e-3, end_lr=1e-4)
    idx = np.arange(4)
    rec = vla_train_step(model, state, _batch(vla_data, idx), lam=0.1, cfg=opt,
                         step=1, total_steps=10, noise_rng=RngStream(0, "n"))
    assert np.isfinite(rec["total_loss"])
    assert rec["total_loss"] == pytest.approx(rec["action_loss"] + 0.1 * rec["flow_loss"], abs=1e-6)


def test_vla_nodepth_variant_freezes_depth_pathway(vocab, vla_data):
    model, state = small_vla_model(vocab)
    state.set_trainable(("backbone", "action_expert"))
    opt = OptimizerConfig(peak_lr=1e-3, end_lr=1e-4)
    before_depth = group_hash(state.groups["depth_head"])
    before_conn = group_hash(state.groups["connector"])
    for step in (1, 2, 3):
        idx = RngStream(0, "b").child(str(step)).integers(0, vla_data.n_items, 4)
        rec = vla_train_step(model, state, _batch(vla_data, idx), lam=0.0, cfg=opt,
                             step=step, total_steps=10, noise_rng=RngStream(0, "n").child(str(step)))
        assert np.isnan(rec["flow_loss"])
        assert rec["total_loss"] == pytest.approx(rec["action_loss"], abs=1e-7)
    assert group_hash(state.groups["depth_head"]) == before_depth
    assert group_hash(state.groups["connector"]) == before_conn
    assert group_hash(state.groups["backbone"]) != before_depth  # backbone moved


def test_heldout_mse_computes(vocab, vla_data):
    model, _ = small_vla_model(vocab)
    idx = np.arange(min(8, vla_data.n_items))
    mse = heldout_action_mse(model, vla_data, idx, steps=2)
    assert np.isfinite(mse) and mse > 0


# -- rollouts ------------------------------------------------------------------

def test_expert_policy_rollout_is_perfect(vocab):
    model, _ = small_vla_model(vocab)
    summary = rollout_policy(model, vocab, seeds=range(20), policy="expert")
    assert summary.success_rate == 1.0
    assert summary.mean_progress == 1.0


def test_random_policy_rarely_succeeds(vocab):
    model, _ = small_vla_model(vocab)
    summary = rollout_policy(model, vocab, seeds=range(100), policy="random")
    assert summary.success_rate < 0.05


def test_progress_metric_definition(vocab):
    model, _ = small_vla_model(vocab)
    summary = rollout_policy(model, vocab, seeds=range(30), policy="random")
    for r in summary.per_episode:
        assert 0.0 <= r["progress"] <= 1.0
        assert (r["progress"] == 1.0) == bool(r["success"])


def test_model_rollout_deterministic(vocab):
    model, _ = small_vla_model(vocab)
    a = rollout_policy(model, vocab, seeds=range(5), sampler_steps=2)
    b = rollout_policy(model, vocab, seeds=range(5), sampler_steps=2)
    assert a.per_episode == b.per_episode
