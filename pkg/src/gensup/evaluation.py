"""Metrics: per-task QA accuracy (greedy decode), depth AbsRel/RMSE, chance rates.

Matching rules are pure functions of (prediction, truth, task_type) plus the
record's scene context for grounding: categorical answers match exactly,
numeric answers within one quantization unit, boxes by IoU >= 0.5, points by
mask membership of the denormalized pixel, traces by mean pixel deviation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import qa as qa_mod
from .backbone import greedy_decode
from .dataset import SceneEntry
from .depth_head import normalize_depth, sample_depth
from .flow import denormalize_from_unit
from .model import JointModel
from .qa import QARecord, parse_box, parse_number, parse_point, parse_trace
from .rng import RngStream
from .vocab import Vocabulary

NUMERIC_UNITS = {"abs_dist": 0.1, "obj_size": 1.0, "room_size": 0.1}
TRACE_MATCH_PX = 6.0
IOU_THRESHOLD = 0.5


def box_iou(a: list[int], b: list[int]) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix = max(0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    area_a = max(0, ax1 - ax0) * max(0, ay1 - ay0)
    area_b = max(0, bx1 - bx0) * max(0, by1 - by0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def match_answer(pred: str, rec: QARecord, entry: SceneEntry | None = None) -> bool:
    """Decide correctness of a decoded answer string for one record."""
    task = rec.task_type
    if task in NUMERIC_UNITS:
        p = parse_number(pred)
        t = parse_number(rec.answer)
        if p is None or t is None:
            return False
        return abs(p - t) <= NUMERIC_UNITS[task] + 1e-9
    if task == "ground_box":
        pb = parse_box(pred)
        tb = parse_box(rec.answer)
        if pb is None or tb is None:
            return False
        return box_iou(pb, tb) >= IOU_THRESHOLD
    if task == "ground_point":
        pp = parse_point(pred)
        if pp is None or entry is None:
            return False
        res = entry.mask.shape[0]
        x = int(round(qa_mod.denormalize_coords(pp[0], res)))
        y = int(round(qa_mod.denormalize_coords(pp[1], res)))
        if not (0 <= x < res and 0 <= y < res):
            return False
        oid = entry.scene.by_category(rec.args["target"])[0].oid
        near = entry.mask[max(0, y - 1):y + 2, max(0, x - 1):x + 2]
        return bool((near == oid).any())
    if task == "trajectory":
        pt = parse_trace(pred)
        tt = parse_trace(rec.answer)
        if pt is None or tt is None or len(pt) != len(tt):
            return False
        res = entry.mask.shape[0] if entry is not None else 64
        dev = [np.hypot(qa_mod.denormalize_coords(a[0] - b[0], res),
                        qa_mod.denormalize_coords(a[1] - b[1], res))
               for a, b in zip(pt, tt)]
        return float(np.mean(dev)) <= TRACE_MATCH_PX
    # categorical: count, rel_dist, rel_dir, plan_*
    return pred == rec.answer


def chance_rates(records: list[QARecord]) -> dict[str, float]:
    """Uniform guessing over the task's answer support in this record set."""
    support: dict[str, set] = {}
    for rec in records:
        support.setdefault(rec.task_type, set()).add(rec.answer)
    return {task: 1.0 / len(answers) for task, answers in support.items()}


@dataclass
class QAEvalResult:
    per_task: dict[str, dict]  # task -> {n, correct, accuracy, chance}
    predictions: list[tuple[str, str, str, bool]] = field(default_factory=list)

    def accuracy(self, task: str) -> float:
        return self.per_task[task]["accuracy"] if task in self.per_task else float("nan")

    def mean_accuracy(self, tasks) -> float:
        """Micro-average over the records of the listed tasks."""
        n = sum(self.per_task[t]["n"] for t in tasks if t in self.per_task)
        c = sum(self.per_task[t]["correct"] for t in tasks if t in self.per_task)
        return c / n if n else float("nan")


def eval_qa(model: JointModel, scenes: list[SceneEntry], vocab: Vocabulary,
            batch_size: int = 64, max_answer: int = 56,
            expected_vocab_sha: str | None = None) -> QAEvalResult:
    if expected_vocab_sha is not None and vocab.sha256() != expected_vocab_sha:
        raise RuntimeError("vocabulary hash mismatch between checkpoint and dataset")
    items = [(entry, rec) for entry in scenes for rec in entry.records]
    per_task: dict[str, dict] = {}
    predictions = []
    for lo in range(0, len(items), batch_size):
        chunk = items[lo:lo + batch_size]
        images = torch.from_numpy(np.stack([e.rgb for e, _ in chunk]))
        prompts = [vocab.encode(r.prompt) for _, r in chunk]
        decoded = greedy_decode(model.backbone, images, prompts, vocab, max_answer=max_answer)
        for (entry, rec), ids in zip(chunk, decoded):
            pred = vocab.decode(ids)
            ok = match_answer(pred, rec, entry)
            d = per_task.setdefault(rec.task_type, {"n": 0, "correct": 0})
            d["n"] += 1
            d["correct"] += int(ok)
            predictions.append((rec.task_type, pred, rec.answer, ok))
    chances = chance_rates([rec for _, rec in items])
    for task, d in per_task.items():
        d["accuracy"] = d["correct"] / d["n"]
        d["chance"] = chances[task]
    return QAEvalResult(per_task=per_task, predictions=predictions)


@dataclass
class DepthEvalResult:
    abs_rel: float
    rmse: float
    n_scenes: int


def eval_depth(model: JointModel, scenes: list[SceneEntry], steps: int = 20,
               seed: int = 1234, batch_size: int = 16) -> DepthEvalResult:
    """Generate depth per scene, denormalize with the stored per-sample
    bounds, and compare on interior foreground pixels."""
    errs, sqs = [], []
    with torch.no_grad():
        for lo in range(0, len(scenes), batch_size):
            chunk = scenes[lo:lo + batch_size]
            images = torch.from_numpy(np.stack([e.rgb for e in chunk]))
            cond = model.connector(model.backbone.forward_visual(images))
            gen = sample_depth(model.depth_head, cond, steps, RngStream(seed, f"depth-eval/{lo}"))
            for j, entry in enumerate(chunk):
                gt = torch.from_numpy(entry.depth_target())
                tgt = normalize_depth(gt)
                pred = denormalize_from_unit(gen[j], tgt.d_min, tgt.d_max)
                fg = torch.from_numpy(entry.foreground_target())
                if not fg.any():
                    continue
                err = (pred - gt)[fg]
                errs.append(float((err.abs() / gt[fg]).mean()))
                sqs.append(float((err ** 2).mean()))
    return DepthEvalResult(abs_rel=float(np.mean(errs)), rmse=float(np.sqrt(np.mean(sqs))),
                           n_scenes=len(errs))


def export_depth_maps(model: JointModel, scenes: list[SceneEntry], out_dir: str | Path,
                      steps: int = 20, seed: int = 1234) -> None:
    """Write generated maps as PFM with per-sample bounds in a sidecar file."""
    from .rasters import write_pfm
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for i, entry in enumerate(scenes):
            images = torch.from_numpy(entry.rgb).unsqueeze(0)
            cond = model.connector(model.backbone.forward_visual(images))
            gen = sample_depth(model.depth_head, cond, steps, RngStream(seed, f"export/{i}"))[0]
            tgt = normalize_depth(torch.from_numpy(entry.depth_target()))
            metric = denormalize_from_unit(gen, tgt.d_min, tgt.d_max)
            write_pfm(out / f"{entry.scene_id}.pfm", metric.numpy().astype(np.float32))
            (out / f"{entry.scene_id}.bounds.txt").write_text(
                f"d_min {tgt.d_min}\nd_max {tgt.d_max}\n")


def write_qa_csv(path: str | Path, result: QAEvalResult, meta: dict[str, str] | None = None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "n", "correct", "accuracy", "chance"])
        for task in sorted(result.per_task):
            d = result.per_task[task]
            w.writerow([task, d["n"], d["correct"], f"{d['accuracy']:.4f}", f"{d['chance']:.4f}"])
        for k, v in sorted((meta or {}).items()):
            w.writerow([f"#{k}", v, "", "", ""])
