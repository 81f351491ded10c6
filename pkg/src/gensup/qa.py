"""QA generation with exact geometric oracles.

Each record stores the question args alongside prompt/answer, so an
independent validation pass can recompute every answer straight from scene
geometry (and rendered masks) and assert string equality. Numbers in
answers are serialized digit by digit so the closed vocabulary stays small.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .scenes import CATEGORIES, RES, Scene, RenderedSample, category_name
from .spline import resample_trajectory

TASK_TYPES = (
    "count", "abs_dist", "rel_dist", "obj_size", "room_size", "rel_dir",
    "ground_box", "ground_point", "plan_done", "plan_next", "plan_first", "trajectory",
)

SPATIAL_TASKS = ("count", "abs_dist", "rel_dist", "obj_size", "room_size", "rel_dir")
DISTANCE_TASKS = ("abs_dist", "rel_dist")

REL_DIST_MARGIN = 1.3
REL_DIR_MARGIN = 1.2

REL_DIR_CONVENTION = (
    "camera-frame egocentric: dx = (target - anchor) . right, dz = (target - anchor) . forward; "
    "|dx| > |dz| picks left/right by sign of dx, otherwise front (dz < 0) or back (dz > 0); "
    "ties go to the front/back axis"
)

PROMPTS = {
    "count": "how many {category} are in the scene ?",
    "abs_dist": "how far apart are the {a} and the {b} in meters ?",
    "rel_dist": "which category of object is closest to the {anchor} ?",
    "obj_size": "what is the longest dimension of the {target} in centimeters ?",
    "room_size": "what is the floor area of this room in square meters ?",
    "rel_dir": "from the camera , which direction is the {target} relative to the {anchor} ?",
    "ground_box": "locate the {target} and output its bounding box .",
    "ground_point": "point to a spot on the {target} .",
    "plan_done": "task : {instr} . is the task finished ?",
    "plan_next": "task : {instr} . which step comes after the current one ?",
    "plan_first": "task : {instr} . what is the first step ?",
    "trajectory": "task : {instr} . trace the gripper path to complete the task .",
}

SUBTASK_NAMES = ("reach", "grasp", "move", "release")
DIRECTION_WORDS = ("left", "right", "front", "back")


class QAGenerationError(RuntimeError):
    pass


@dataclass
class QARecord:
    task_type: str
    prompt: str
    answer: str
    geometry: dict | None
    args: dict
    scene_id: str
    seed: int

    def to_json(self) -> str:
        return json.dumps({
            "task_type": self.task_type, "prompt": self.prompt, "answer": self.answer,
            "geometry": self.geometry, "args": self.args,
            "scene_id": self.scene_id, "seed": self.seed,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "QARecord":
        d = json.loads(line)
        return cls(**d)


# ---------------------------------------------------------------------------
# serialization of numeric answers

def fmt_int(n: int) -> str:
    return " ".join(str(int(n)))


def fmt_decimal(x: float, decimals: int = 1) -> str:
    return " ".join(f"{x:.{decimals}f}")


def parse_number(answer: str) -> float | None:
    compact = answer.replace(" ", "")
    try:
        return float(compact)
    except ValueError:
        return None


def _fmt_coords(values: list[int], open_tok: str, close_tok: str) -> str:
    parts = [fmt_int(v) for v in values]
    return f"{open_tok} " + " , ".join(parts) + f" {close_tok}"


def fmt_box(box: list[int]) -> str:
    return _fmt_coords(box, "<box>", "</box>")


def fmt_point(pt: list[int]) -> str:
    return _fmt_coords(pt, "<pt>", "</pt>")


def fmt_trace(points: list[list[int]]) -> str:
    groups = [f"{fmt_int(x)} , {fmt_int(y)}" for x, y in points]
    return "<trace> " + " ; ".join(groups) + " </trace>"


def _parse_int_groups(answer: str, open_tok: str, close_tok: str) -> list[int] | None:
    toks = answer.split()
    if len(toks) < 3 or toks[0] != open_tok or toks[-1] != close_tok:
        return None
    try:
        return [int("".join(g.split())) for g in " ".join(toks[1:-1]).split(",")]
    except ValueError:
        return None


def parse_box(answer: str) -> list[int] | None:
    vals = _parse_int_groups(answer, "<box>", "</box>")
    return vals if vals is not None and len(vals) == 4 else None


def parse_point(answer: str) -> list[int] | None:
    vals = _parse_int_groups(answer, "<pt>", "</pt>")
    return vals if vals is not None and len(vals) == 2 else None


def parse_trace(answer: str) -> list[list[int]] | None:
    toks = answer.split()
    if len(toks) < 3 or toks[0] != "<trace>" or toks[-1] != "</trace>":
        return None
    points = []
    for group in " ".join(toks[1:-1]).split(";"):
        vals = [v.strip() for v in group.split(",")]
        if len(vals) != 2:
            return None
        try:
            points.append([int("".join(v.split())) for v in vals])
        except ValueError:
            return None
    return points


# ---------------------------------------------------------------------------
# coordinate normalization

def normalize_coords(value: float, extent: float) -> int:
    """round(1000 * value / extent) with half-up ties, clamped to [0, 1000]."""
    if extent <= 0:
        raise ValueError(f"extent must be positive, got {extent}")
    if not (0 <= value <= extent):
        raise ValueError(f"value {value} outside [0, {extent}]")
    return int(min(1000, max(0, math.floor(1000.0 * value / extent + 0.5))))


def denormalize_coords(norm: int, extent: float) -> float:
    return norm * extent / 1000.0


def mask_to_bbox(mask: np.ndarray, object_id: int) -> tuple[int, int, int, int]:
    """Tight inclusive pixel bounds (x_min, y_min, x_max, y_max); x = column."""
    rows, cols = np.nonzero(mask == object_id)
    if rows.size == 0:
        raise ValueError(f"object id {object_id} absent from mask")
    return int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())


def sample_point_in_mask(mask: np.ndarray, object_id: int, rng: RngStream) -> tuple[int, int]:
    """A uniformly drawn (x, y) pixel carrying `object_id`."""
    rows, cols = np.nonzero(mask == object_id)
    if rows.size == 0:
        raise ValueError(f"object id {object_id} absent from mask")
    i = int(rng.integers(0, rows.size))
    return int(cols[i]), int(rows[i])


# ---------------------------------------------------------------------------
# pure-geometry oracles (answer from scene + args; no randomness)

def unique_categories(scene: Scene) -> list[str]:
    seen: dict[str, int] = {}
    for o in scene.objects:
        seen[o.category] = seen.get(o.category, 0) + 1
    return [c for c, n in seen.items() if n == 1]


def oracle_count(scene: Scene, args: dict) -> str:
    label = args["category"]
    if label in ("ball", "box"):  # kind-level count over all colors
        kind = "sphere" if label == "ball" else "box"
        return fmt_int(sum(1 for o in scene.objects if o.kind == kind))
    return fmt_int(len(scene.by_category(label)))


def oracle_abs_dist(scene: Scene, args: dict) -> str:
    a = scene.by_category(args["a"])[0]
    b = scene.by_category(args["b"])[0]
    return fmt_decimal(round(float(np.linalg.norm(a.center - b.center)), 1))


def _category_min_dists(scene: Scene, anchor) -> dict[str, float]:
    dists: dict[str, float] = {}
    for o in scene.objects:
        if o.oid == anchor.oid:
            continue
        d = float(np.linalg.norm(o.center - anchor.center))
        if o.category not in dists or d < dists[o.category]:
            dists[o.category] = d
    return dists


def oracle_rel_dist(scene: Scene, args: dict) -> str:
    anchor = scene.by_category(args["anchor"])[0]
    dists = _category_min_dists(scene, anchor)
    return min(dists, key=dists.get)


def oracle_obj_size(scene: Scene, args: dict) -> str:
    obj = scene.by_category(args["target"])[0]
    return fmt_int(int(math.floor(obj.max_extent * 100.0 + 0.5)))


def oracle_room_size(scene: Scene, args: dict) -> str:
    return fmt_decimal(round(scene.floor_area(), 1))


def rel_dir_components(scene: Scene, anchor_cat: str, target_cat: str) -> tuple[float, float]:
    anchor = scene.by_category(anchor_cat)[0]
    target = scene.by_category(target_cat)[0]
    fwd, right, _ = scene.camera.basis()
    delta = target.center - anchor.center
    return float(delta @ right), float(delta @ fwd)


def oracle_rel_dir(scene: Scene, args: dict) -> str:
    dx, dz = rel_dir_components(scene, args["anchor"], args["target"])
    if abs(dx) > abs(dz):
        return "right" if dx > 0 else "left"
    if dz == 0.0:
        return "front"
    return "back" if dz > 0 else "front"


def oracle_ground_box(scene: Scene, sample: RenderedSample, args: dict) -> tuple[str, dict]:
    oid = scene.by_category(args["target"])[0].oid
    x0, y0, x1, y1 = mask_to_bbox(sample.mask, oid)
    res = sample.mask.shape[0]
    box = [normalize_coords(v, res) for v in (x0, y0, x1, y1)]
    return fmt_box(box), {"box": box}


def oracle_ground_point(scene: Scene, sample: RenderedSample, args: dict) -> tuple[str, dict]:
    px, py = args["pixel"]
    res = sample.mask.shape[0]
    pt = [normalize_coords(px, res), normalize_coords(py, res)]
    return fmt_point(pt), {"point": pt}


SPATIAL_ORACLES = {
    "count": oracle_count,
    "abs_dist": oracle_abs_dist,
    "rel_dist": oracle_rel_dist,
    "obj_size": oracle_obj_size,
    "room_size": oracle_room_size,
    "rel_dir": oracle_rel_dir,
}


# ---------------------------------------------------------------------------
# record generators (randomness only picks the question args)

def spatial_qa(scene: Scene, sample: RenderedSample, kind: str, rng: RngStream) -> QARecord:
    if kind not in SPATIAL_TASKS:
        raise ValueError(f"unknown spatial task {kind!r}")
    cats = sorted({o.category for o in scene.objects})
    uniq = sorted(unique_categories(scene))
    if kind == "count":
        kinds_present = sorted({"ball" if o.kind == "sphere" else "box" for o in scene.objects})
        absent = [category_name(c, k) for c, k in CATEGORIES if category_name(c, k) not in cats]
        pool = cats + kinds_present  # color-level and kind-level variants
        if absent:  # sometimes ask about a missing category (answer "0")
            pool = pool + [absent[int(rng.integers(0, len(absent)))]]
        args = {"category": pool[int(rng.integers(0, len(pool)))]}
        prompt = PROMPTS[kind].format(category=args["category"])
    elif kind == "abs_dist":
        if len(uniq) < 2:
            raise QAGenerationError("abs_dist needs two uniquely named objects")
        i, j = rng.choice(len(uniq), 2)
        args = {"a": uniq[int(i)], "b": uniq[int(j)]}
        prompt = PROMPTS[kind].format(a=args["a"], b=args["b"])
    elif kind == "rel_dist":
        if len(scene.objects) < 3:
            raise QAGenerationError("rel_dist needs at least 3 objects")
        anchors = []
        for cat in uniq:
            anchor = scene.by_category(cat)[0]
            dists = sorted(_category_min_dists(scene, anchor).values())
            if len(dists) >= 2 and dists[1] >= REL_DIST_MARGIN * dists[0]:
                anchors.append(cat)
            elif len(dists) == 1:
                anchors.append(cat)
        if not anchors:
            raise QAGenerationError("no unambiguous rel_dist anchor")
        args = {"anchor": anchors[int(rng.integers(0, len(anchors)))]}
        prompt = PROMPTS[kind].format(anchor=args["anchor"])
    elif kind == "obj_size":
        if not uniq:
            raise QAGenerationError("obj_size needs a uniquely named object")
        args = {"target": uniq[int(rng.integers(0, len(uniq)))]}
        prompt = PROMPTS[kind].format(target=args["target"])
    elif kind == "room_size":
        args = {}
        prompt = PROMPTS[kind]
    else:  # rel_dir
        if len(uniq) < 2:
            raise QAGenerationError("rel_dir needs two uniquely named objects")
        pairs = []
        for a in uniq:
            for b in uniq:
                if a == b:
                    continue
                dx, dz = rel_dir_components(scene, a, b)
                hi, lo = max(abs(dx), abs(dz)), min(abs(dx), abs(dz))
                if lo == 0.0 or hi / lo >= REL_DIR_MARGIN:
                    pairs.append((a, b))
        if not pairs:
            raise QAGenerationError("no unambiguous rel_dir pair")
        a, b = pairs[int(rng.integers(0, len(pairs)))]
        args = {"anchor": a, "target": b}
        prompt = PROMPTS[kind].format(anchor=a, target=b)
    answer = SPATIAL_ORACLES[kind](scene, args)
    return QARecord(task_type=kind, prompt=prompt, answer=answer, geometry=None,
                    args=args, scene_id=scene.scene_id, seed=scene.seed)


def grounding_qa(scene: Scene, sample: RenderedSample, rng: RngStream,
                 kind: str = "ground_box", min_pixels: int = 10) -> QARecord:
    if kind not in ("ground_box", "ground_point"):
        raise ValueError(f"unknown grounding task {kind!r}")
    visible = []
    for cat in sorted(unique_categories(scene)):
        oid = scene.by_category(cat)[0].oid
        if int((sample.mask == oid).sum()) >= min_pixels:
            visible.append(cat)
    if not visible:
        raise QAGenerationError("no sufficiently visible uniquely named object")
    target = visible[int(rng.integers(0, len(visible)))]
    if kind == "ground_box":
        args = {"target": target}
        answer, geometry = oracle_ground_box(scene, sample, args)
    else:
        oid = scene.by_category(target)[0].oid
        px, py = sample_point_in_mask(sample.mask, oid, rng)
        args = {"target": target, "pixel": [px, py]}
        answer, geometry = oracle_ground_point(scene, sample, args)
    prompt = PROMPTS[kind].format(target=target)
    return QARecord(task_type=kind, prompt=prompt, answer=answer, geometry=geometry,
                    args=args, scene_id=scene.scene_id, seed=scene.seed)


# ---------------------------------------------------------------------------
# planning / trajectory records over annotated episodes

def oracle_plan_done(episode, anchor_step: int) -> str:
    return "yes" if episode.completed_at(anchor_step) == len(episode.labels) else "no"


def oracle_plan_next(episode, anchor_step: int) -> str:
    nxt = episode.completed_at(anchor_step) + 1
    return episode.labels[nxt] if nxt < len(episode.labels) else "done"


def oracle_plan_first(episode) -> str:
    return episode.labels[0]


def oracle_trajectory(episode, anchor_step: int, res: int = RES) -> tuple[str, dict, np.ndarray]:
    path = episode.effector_pixels(res)[anchor_step:]
    trace = resample_trajectory(path)
    pts = [[normalize_coords(float(x), res), normalize_coords(float(y), res)]
           for x, y in trace.resampled]
    return fmt_trace(pts), {"trace": pts}, trace.resampled


def plan_qa(episode, anchor_step: int, scene_id: str, seed: int) -> list[QARecord]:
    """plan_done / plan_next / plan_first for one anchor frame of an episode."""
    if not episode.labels:
        raise QAGenerationError("episode carries no sub-task labels")
    instr = episode.instruction
    records = []
    for kind, answer in (
        ("plan_done", oracle_plan_done(episode, anchor_step)),
        ("plan_next", oracle_plan_next(episode, anchor_step)),
        ("plan_first", oracle_plan_first(episode)),
    ):
        records.append(QARecord(
            task_type=kind, prompt=PROMPTS[kind].format(instr=instr), answer=answer,
            geometry=None, args={"anchor_step": anchor_step},
            scene_id=scene_id, seed=seed))
    return records


def trajectory_qa(episode, anchor_step: int, scene_id: str, seed: int) -> QARecord:
    answer, geometry, _ = oracle_trajectory(episode, anchor_step)
    return QARecord(
        task_type="trajectory", prompt=PROMPTS["trajectory"].format(instr=episode.instruction),
        answer=answer, geometry=geometry, args={"anchor_step": anchor_step},
        scene_id=scene_id, seed=seed)


# ---------------------------------------------------------------------------
# vocabulary

def vocabulary_tokens() -> list[str]:
    """Every token the templates and answer serializers can emit."""
    import re

    words: list[str] = []

    def add(text: str):
        for tok in text.split():
            if tok not in words:
                words.append(tok)

    for template in PROMPTS.values():
        add(re.sub(r"\{[a-z_]+\}", " ", template))
    for color, kind in CATEGORIES:
        add(category_name(color, kind))
    add("put the into goal zone place held")
    add("ball box")
    add("gripper holding empty")
    for d in "0123456789":
        add(d)
    add(". , ; <box> </box> <pt> </pt> <trace> </trace>")
    add(" ".join(DIRECTION_WORDS))
    add("yes no done")
    add(" ".join(SUBTASK_NAMES))
    return words


def build_vocabulary():
    from .vocab import Vocabulary
    return Vocabulary(vocabulary_tokens())
