import math

import numpy as np
import pytest
import torch

from gensup.backbone import Backbone, BackboneConfig, ce_loss, greedy_decode, patchify, unpatchify
from gensup.rng import RngStream


def small_backbone(vocab_size=20):
    cfg = BackboneConfig(image_size=16, patch=8, dim=16, layers=2, heads=2,
                         max_text=16, vocab_size=vocab_size)
    bb = Backbone(cfg)
    bb.init_parameters(RngStream(0, "bb"), zero_head=False)
    return bb


def test_patchify_row_major_order():
    img = torch.arange(4, dtype=torch.float32).reshape(1, 2, 2, 1).expand(1, 2, 2, 3).clone()
    img = torch.arange(12, dtype=torch.float32).reshape(1, 2, 2, 3)
    patches = patchify(img, 1)
    assert patches.shape == (1, 4, 3)
    assert torch.equal(patches[0, 0], img[0, 0, 0])
    assert torch.equal(patches[0, 1], img[0, 0, 1])
    assert torch.equal(patches[0, 2], img[0, 1, 0])
    assert torch.equal(patches[0, 3], img[0, 1, 1])


def test_patchify_constant_image_equal_patches():
    img = torch.full((1, 8, 8, 3), 0.25)
    patches = patchify(img, 4)
    assert torch.equal(patches[0, 0], patches[0, 1])
    assert torch.equal(patches[0, 0], patches[0, 3])


def test_patchify_unpatchify_inverse_bit_identical():
    img = RngStream(1, "img").torch_normal((2, 16, 16, 3))
    rec = unpatchify(patchify(img, 4), 4, 16, 16, 3)
    assert torch.equal(rec, img)


def test_patchify_indivisible_raises():
    with pytest.raises(ValueError):
        patchify(torch.zeros(1, 10, 10, 3), 4)


def test_zero_head_uniform_ce_is_log_v():
    cfg = BackboneConfig(image_size=16, patch=8, dim=16, layers=2, heads=2,
                         max_text=16, vocab_size=20)
    bb = Backbone(cfg)
    bb.init_parameters(RngStream(0, "bb"), zero_head=True)
    img = torch.rand(1, 16, 16, 3)
    tokens = torch.tensor([[3, 5, 7, 2]])
    _, logits = bb.forward(img, tokens, pad_id=0)
    assert torch.all(logits == 0)
    targets = torch.tensor([[5, 7, 2, 0]])
    mask = torch.tensor([[1.0, 1.0, 1.0, 0.0]])
    assert float(ce_loss(logits, targets, mask)) == pytest.approx(math.log(20), rel=1e-6)


def test_ce_against_float64_log_softmax_oracle():
    logits = RngStream(2, "l").torch_normal((1, 3, 5))
    targets = torch.tensor([[1, 4, 2]])
    mask = torch.ones(1, 3)
    got = float(ce_loss(logits, targets, mask))
    l64 = logits.double().numpy()
    ref = 0.0
    for i in range(3):
        row = l64[0, i]
        ref -= (row[targets[0, i]] - np.log(np.exp(row - row.max()).sum()) - row.max())
    ref /= 3
    assert got == pytest.approx(ref, abs=1e-6)
    # float64 path agrees to 1e-10
    got64 = float(ce_loss(logits.double(), targets, mask.double()))
    assert got64 == pytest.approx(ref, abs=1e-10)


def test_ce_saturated_correct_class():
    logits = torch.zeros(1, 1, 4)
    logits[0, 0, 2] = 100.0
    loss = ce_loss(logits, torch.tensor([[2]]), torch.ones(1, 1))
    assert float(loss) < 1e-6


def test_ce_all_pad_raises():
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(1, 2, 4), torch.zeros(1, 2, dtype=torch.long), torch.zeros(1, 2))


def test_ce_mean_equals_sum_over_count():
    logits = RngStream(3, "l").torch_normal((2, 4, 7))
    targets = torch.randint(0, 7, (2, 4))
    mask = torch.tensor([[1.0, 1, 0, 0], [1, 1, 1, 0]])
    mean_loss = float(ce_loss(logits, targets, mask))
    per = -torch.log_softmax(logits, -1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    assert mean_loss == pytest.approx(float((per * mask).sum() / 5.0), rel=1e-6)


def test_causality_token_permutation():
    bb = small_backbone()
    img = torch.rand(1, 16, 16, 3)
    tokens = torch.tensor([[4, 6, 8, 10, 12, 14]])
    _, logits_a = bb.forward(img, tokens, pad_id=0)
    swapped = tokens.clone()
    swapped[0, 2], swapped[0, 4] = tokens[0, 4], tokens[0, 2]
    _, logits_b = bb.forward(img, swapped, pad_id=0)
    assert torch.allclose(logits_a[0, :2], logits_b[0, :2], atol=1e-6)
    assert not torch.allclose(logits_a[0, 2:], logits_b[0, 2:], atol=1e-6)


def test_forward_deterministic():
    bb = small_backbone()
    img = torch.rand(2, 16, 16, 3)
    tokens = torch.randint(1, 19, (2, 5))
    h1, l1 = bb.forward(img, tokens, pad_id=0)
    h2, l2 = bb.forward(img, tokens, pad_id=0)
    assert torch.equal(h1.h_o, h2.h_o)
    assert torch.equal(l1, l2)


def test_h_o_depends_on_every_pixel():
    bb = small_backbone()
    img = torch.rand(1, 16, 16, 3)
    base = bb.forward_visual(img)
    poked = img.clone()
    poked[0, 13, 2, 1] += 0.01
    assert not torch.equal(bb.forward_visual(poked), base)


def test_forward_visual_matches_full_forward_slice():
    bb = small_backbone()
    img = torch.rand(2, 16, 16, 3)
    tokens = torch.randint(1, 19, (2, 6))
    hidden, _ = bb.forward(img, tokens, pad_id=0)
    vis = bb.forward_visual(img)
    assert torch.allclose(hidden.h_o, vis, atol=1e-5)


def test_sequence_over_max_length_raises():
    bb = small_backbone()
    img = torch.rand(1, 16, 16, 3)
    with pytest.raises(ValueError):
        bb.forward(img, torch.zeros(1, 17, dtype=torch.long), pad_id=0)


def test_greedy_decode_stops_at_eos():
    bb = small_backbone()
    # bias the head so the argmax is always <eos> (id 2)
    with torch.no_grad():
        bb.lm_head.bias[2] = 50.0
    img = torch.rand(2, 16, 16, 3)

    class V:
        pad_id, bos_id, eos_id, sep_id = 0, 1, 2, 3
    out = greedy_decode(bb, img, [[5, 6], [7]], V())
    assert out == [[], []]
