import numpy as np
import pytest
import torch

from gensup.params import (CheckpointError, ModelState, ParamGroup, ShapeMismatchError,
                           group_hash, load_checkpoint, load_into_state, save_checkpoint,
                           state_hashes)


def tiny_state():
    state = ModelState()
    state.add_group(ParamGroup("backbone", {"w": torch.randn(3, 4), "b": torch.randn(4)}))
    state.add_group(ParamGroup("connector", {"u": torch.randn(2)}, frozen=True))
    state.step = 17
    return state


def test_checkpoint_round_trip(tmp_path):
    state = tiny_state()
    path = tmp_path / "m.ckpt"
    save_checkpoint(state, path, meta={"vocab_sha256": "abc", "note": "hello world"})
    ckpt = load_checkpoint(path)
    assert ckpt.step == 17
    assert ckpt.meta["vocab_sha256"] == "abc"
    assert ckpt.meta["note"] == "hello world"
    assert ckpt.frozen == {"backbone": False, "connector": True}
    for gname, g in state.groups.items():
        for tname, t in g.tensors.items():
            assert np.array_equal(ckpt.tensors[gname][tname], t.numpy())


def test_checkpoint_bytes_deterministic(tmp_path):
    state = tiny_state()
    save_checkpoint(state, tmp_path / "a.ckpt")
    save_checkpoint(state, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_load_into_state_and_shape_mismatch(tmp_path):
    state = tiny_state()
    save_checkpoint(state, tmp_path / "m.ckpt")
    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    other = tiny_state()
    load_into_state(ckpt, other)
    assert group_hash(other.groups["backbone"]) == group_hash(state.groups["backbone"])

    bad = ModelState()
    bad.add_group(ParamGroup("backbone", {"w": torch.zeros(5, 5), "b": torch.zeros(4)}))
    with pytest.raises(ShapeMismatchError, match="backbone/w"):
        load_into_state(ckpt, bad, groups=["backbone"])


def test_missing_group_raises(tmp_path):
    state = tiny_state()
    save_checkpoint(state, tmp_path / "m.ckpt")
    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    extra = ModelState()
    extra.add_group(ParamGroup("action_expert", {"w": torch.zeros(2)}))
    with pytest.raises(CheckpointError, match="action_expert"):
        load_into_state(ckpt, extra)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT 1\nEND\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_group_hash_tracks_content():
    g = ParamGroup("backbone", {"w": torch.ones(4)})
    h1 = group_hash(g)
    g.tensors["w"].data[0] = 2.0
    assert group_hash(g) != h1
    g.tensors["w"].data[0] = 1.0
    assert group_hash(g) == h1


def test_set_trainable_controls_freeze_and_requires_grad():
    state = tiny_state()
    state.set_trainable({"connector"})
    assert state.groups["backbone"].frozen
    assert not state.groups["connector"].frozen
    assert all(not t.requires_grad for t in state.groups["backbone"].tensors.values())
    assert all(t.requires_grad for t in state.groups["connector"].tensors.values())
    with pytest.raises(ValueError):
        state.set_trainable({"nonexistent"})


def test_state_hashes_cover_all_groups():
    state = tiny_state()
    hashes = state_hashes(state)
    assert set(hashes) == {"backbone", "connector"}
