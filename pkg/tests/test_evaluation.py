import numpy as np
import pytest
import torch

from gensup.evaluation import (box_iou, chance_rates, eval_qa,
                               match_answer)
from gensup.model import JointModel, desk_model_config
from gensup.qa import QARecord, fmt_box, fmt_decimal, fmt_point, fmt_trace


def rec(task, answer, args=None, geometry=None):
    return QARecord(task_type=task, prompt="p", answer=answer, geometry=geometry,
                    args=args or {}, scene_id="s", seed=0)


# -- matching rules (exhaustive per rule) --------------------------------------

def test_numeric_tolerance_one_unit():
    truth = rec("abs_dist", fmt_decimal(5.0))
    assert match_answer(fmt_decimal(5.0), truth)
    assert match_answer(fmt_decimal(5.1), truth)
    assert not match_answer(fmt_decimal(5.2), truth)
    assert not match_answer("junk words", truth)
    size = rec("obj_size", "4 2")
    assert match_answer("4 3", size)
    assert not match_answer("4 4", size)
    area = rec("room_size", fmt_decimal(28.5))
    assert match_answer(fmt_decimal(28.6), area)
    assert not match_answer(fmt_decimal(28.8), area)


def test_categorical_exact_match():
    truth = rec("rel_dist", "red-ball")
    assert match_answer("red-ball", truth)
    assert not match_answer("red box", truth)
    assert match_answer("yes", rec("plan_done", "yes"))
    assert not match_answer("no", rec("plan_done", "yes"))
    assert match_answer("3", rec("count", "3"))
    assert not match_answer("4", rec("count", "3"))


def test_box_iou_rule():
    truth = rec("ground_box", fmt_box([100, 100, 500, 500]))
    assert match_answer(fmt_box([100, 100, 500, 500]), truth)
    assert match_answer(fmt_box([150, 150, 520, 520]), truth)  # IoU ~ 0.7
    assert not match_answer(fmt_box([600, 600, 900, 900]), truth)
    assert not match_answer("<box> oops </box>", truth)
    assert box_iou([0, 0, 10, 10], [0, 0, 10, 10]) == pytest.approx(1.0)
    assert box_iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0


def test_point_in_mask_rule(small_dataset):
    entry = next(e for e in small_dataset.scenes
                 for r in e.records if r.task_type == "ground_point")
    record = next(r for r in entry.records if r.task_type == "ground_point")
    assert match_answer(record.answer, record, entry)
    assert not match_answer(fmt_point([0, 0]), record, entry)
    assert not match_answer("<pt> bad </pt>", record, entry)


def test_trace_rule():
    pts = [[0, 0], [200, 100], [400, 200], [600, 300], [800, 400], [1000, 500]]
    truth = rec("trajectory", fmt_trace(pts))
    assert match_answer(fmt_trace(pts), truth)
    near = [[p[0] + 20, p[1]] for p in pts]  # ~1.3 px shift at res 64
    assert match_answer(fmt_trace([[min(1000, x), y] for x, y in near]), truth)
    far = [[p[0], min(1000, p[1] + 400)] for p in pts]
    assert not match_answer(fmt_trace(far), truth)


def test_oracle_upper_bound_all_records_match(small_dataset):
    for entry in small_dataset.scenes:
        for record in entry.records:
            assert match_answer(record.answer, record, entry), record.task_type


def test_chance_rates_from_support():
    records = [rec("count", "1"), rec("count", "2"), rec("count", "2"), rec("rel_dir", "left")]
    rates = chance_rates(records)
    assert rates["count"] == pytest.approx(0.5)
    assert rates["rel_dir"] == 1.0


# -- depth metrics --------------------------------------------------------------

def _model(vocab):
    model = JointModel(desk_model_config(len(vocab), dim=32, layers=2, heads=2))
    model.init_parameters(0)
    return model


def test_eval_depth_identity_oracle(small_dataset, vocab, monkeypatch):
    model = _model(vocab)
    _, evals = small_dataset.split(0.3)
    import gensup.evaluation as ev
    from gensup.depth_head import normalize_depth

    batches = [evals[i:i + 16] for i in range(0, len(evals), 16)]
    calls = {"i": 0}

    def gt_sampler(dit, cond, steps, rng, velocity_fn=None):
        chunk = batches[calls["i"]]
        calls["i"] += 1
        return torch.stack([normalize_depth(torch.from_numpy(e.depth_target())).depth_norm
                            for e in chunk])

    monkeypatch.setattr(ev, "sample_depth", gt_sampler)
    res = ev.eval_depth(model, evals)
    assert res.abs_rel == pytest.approx(0.0, abs=1e-6)
    assert res.rmse == pytest.approx(0.0, abs=1e-5)


def test_eval_depth_constant_predictor_matches_oracle_statistic(small_dataset, vocab, monkeypatch):
    model = _model(vocab)
    _, evals = small_dataset.split(0.3)
    import gensup.evaluation as ev
    from gensup.depth_head import normalize_depth

    batches = [evals[i:i + 16] for i in range(0, len(evals), 16)]
    calls = {"i": 0}

    def mean_sampler(dit, cond, steps, rng, velocity_fn=None):
        chunk = batches[calls["i"]]
        calls["i"] += 1
        out = []
        for e in chunk:
            tgt = normalize_depth(torch.from_numpy(e.depth_target()))
            mean_norm = float(tgt.depth_norm.mean())
            out.append(torch.full((32, 32), mean_norm))
        return torch.stack(out)

    monkeypatch.setattr(ev, "sample_depth", mean_sampler)
    res = ev.eval_depth(model, evals)

    # independent one-pass oracle
    errs = []
    for e in evals:
        gt = e.depth_target()
        fg = e.foreground_target()
        if not fg.any():
            continue
        pred = np.full_like(gt, gt.mean())
        errs.append((np.abs(pred - gt) / gt)[fg].mean())
    assert res.abs_rel == pytest.approx(float(np.mean(errs)), abs=1e-5)


def test_eval_qa_untrained_count_at_or_below_chance(small_dataset, vocab):
    model = _model(vocab)
    _, evals = small_dataset.split(0.3)
    result = eval_qa(model, evals, vocab)
    if "count" in result.per_task:
        d = result.per_task["count"]
        sigma = (d["chance"] * (1 - d["chance"]) / max(d["n"], 1)) ** 0.5
        assert d["accuracy"] <= d["chance"] + 4 * sigma + 1e-9


def test_eval_qa_vocab_hash_guard(small_dataset, vocab):
    model = _model(vocab)
    with pytest.raises(RuntimeError, match="hash"):
        eval_qa(model, small_dataset.scenes[:1], vocab, expected_vocab_sha="deadbeef")


def test_metrics_reproduce_exactly(small_dataset, vocab):
    from gensup.evaluation import eval_depth
    model = _model(vocab)
    _, evals = small_dataset.split(0.3)
    a = eval_qa(model, evals, vocab).per_task
    b = eval_qa(model, evals, vocab).per_task
    assert a == b
    da = eval_depth(model, evals, steps=4)
    db = eval_depth(model, evals, steps=4)
    assert (da.abs_rel, da.rmse) == (db.abs_rel, db.rmse)
