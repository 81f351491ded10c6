"""Dataset construction, loading, and full oracle re-validation.

Layout: one directory per scene with rgb.ppm / depth.pfm / mask.pgm /
qa.jsonl / meta.json, plus manifest.txt and vocab.txt at the root. A scene
is either "static" (random room, spatial + grounding records) or "episode"
(one anchor frame of a scripted toy-env episode, planning + trajectory
records). Everything derives from (global_seed, scene_index), so rebuilding
with the same arguments is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import qa as qa_mod
from .qa import (QAGenerationError, QARecord, grounding_qa, plan_qa, spatial_qa,
                 trajectory_qa, build_vocabulary)
from .rasters import read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm
from .rng import RngStream
from .scenes import FAR_PLANE, Camera, Scene, SceneObject, RenderedSample, gen_scene, render, object_ray_params
from .spline import arc_lengths_between, TrajectoryTrace
from .toyenv import Episode, run_episode, env_scene

FORMAT_VERSION = 1
EPISODE_FRACTION = 0.18
DEPTH_TARGET_SIZE = 32

DEFAULT_MIX = {
    "count": 2.0, "abs_dist": 1.0, "rel_dist": 6.0, "obj_size": 1.0,
    "room_size": 0.5, "rel_dir": 1.0, "ground_box": 1.0, "ground_point": 1.0,
    "plan": 1.0, "trajectory": 0.4,
}

STATIC_TASKS = ("count", "abs_dist", "rel_dist", "obj_size", "room_size",
                "rel_dir", "ground_box", "ground_point")


def scene_seed_for(global_seed: int, index: int) -> int:
    digest = hashlib.sha256(f"{global_seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:7], "big")


def validate_mix(mix: dict[str, float]) -> dict[str, float]:
    unknown = set(mix) - set(DEFAULT_MIX)
    if unknown:
        raise ValueError(f"unknown mix keys: {sorted(unknown)}")
    full = dict(DEFAULT_MIX)
    full.update(mix)
    if any(w < 0 for w in full.values()):
        raise ValueError("mix weights must be non-negative")
    if sum(full.values()) <= 0:
        raise ValueError("mix weights must sum to a positive value")
    return full


# ---------------------------------------------------------------------------
# meta serialization

def scene_to_meta(scene: Scene, extra: dict | None = None) -> dict:
    meta = {
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "room": scene.room.tolist(),
        "room_min": scene.room_min.tolist(),
        "camera": {
            "position": scene.camera.position.tolist(),
            "look_at": scene.camera.look_at.tolist(),
            "fov_deg": scene.camera.fov_deg,
        },
        "objects": [{
            "oid": o.oid, "kind": o.kind, "center": o.center.tolist(),
            "size": o.size.tolist(), "color": o.color, "category": o.category,
        } for o in scene.objects],
    }
    meta.update(extra or {})
    return meta


def scene_from_meta(meta: dict) -> Scene:
    cam = Camera(position=np.array(meta["camera"]["position"]),
                 look_at=np.array(meta["camera"]["look_at"]),
                 fov_deg=meta["camera"]["fov_deg"])
    objects = [SceneObject(oid=o["oid"], kind=o["kind"], center=np.array(o["center"]),
                           size=np.array(o["size"]), color=o["color"], category=o["category"])
               for o in meta["objects"]]
    return Scene(room=np.array(meta["room"]), camera=cam, objects=objects,
                 room_min=np.array(meta["room_min"]),
                 scene_id=meta["scene_id"], seed=meta["seed"])


# ---------------------------------------------------------------------------
# build

def _quota(weight: float, stream: RngStream) -> int:
    k = int(weight)
    if stream.uniform() < weight - k:
        k += 1
    return k


def _static_records(scene: Scene, sample: RenderedSample, mix: dict, stream: RngStream) -> list[QARecord]:
    records: list[QARecord] = []
    seen: set[tuple] = set()
    for task in STATIC_TASKS:
        for j in range(_quota(mix[task], stream.child(f"quota/{task}"))):
            rng = stream.child(f"{task}/{j}")
            try:
                if task in ("ground_box", "ground_point"):
                    rec = grounding_qa(scene, sample, rng, kind=task)
                else:
                    rec = spatial_qa(scene, sample, task, rng)
            except QAGenerationError:
                continue
            key = (task, json.dumps(rec.args, sort_keys=True))
            if key in seen:
                continue
            seen.add(key)
            records.append(rec)
    return records


def _episode_records(episode: Episode, anchor: int, scene_id: str, seed: int,
                     mix: dict) -> list[QARecord]:
    records: list[QARecord] = []
    if mix["plan"] > 0:
        records.extend(plan_qa(episode, anchor, scene_id, seed))
    if mix["trajectory"] > 0:
        try:
            records.append(trajectory_qa(episode, anchor, scene_id, seed))
        except Exception:
            pass  # too few distinct points after a late anchor
    return records


@dataclass
class BuiltScene:
    scene: Scene
    sample: RenderedSample
    meta: dict
    records: list[QARecord]


def build_scene(global_seed: int, index: int, mix: dict) -> BuiltScene:
    sseed = scene_seed_for(global_seed, index)
    stream = RngStream(global_seed, f"scene/{index}")
    planning_weight = mix["plan"] + mix["trajectory"]
    is_episode = planning_weight > 0 and float(stream.child("type").uniform()) < EPISODE_FRACTION
    if is_episode:
        episode = run_episode(sseed)
        anchor = int(stream.child("anchor").integers(0, len(episode.states)))
        state = episode.states[anchor]
        scene = env_scene(state, sseed)
        scene.scene_id = f"scene-{global_seed}-{index:05d}"
        sample = render(scene)
        records = _episode_records(episode, anchor, scene.scene_id, sseed, mix)
        meta = scene_to_meta(scene, extra={
            "scene_type": "episode", "env_seed": sseed, "anchor_step": anchor,
            "labels": list(episode.labels), "instruction": episode.instruction,
        })
    else:
        scene = gen_scene(sseed)
        scene.scene_id = f"scene-{global_seed}-{index:05d}"
        sample = render(scene)
        records = _static_records(scene, sample, mix, stream.child("qa"))
        meta = scene_to_meta(scene, extra={"scene_type": "static"})
    for rec in records:
        rec.scene_id = scene.scene_id
    return BuiltScene(scene=scene, sample=sample, meta=meta, records=records)


def build_dataset(n_scenes: int, seed: int, out_dir: str | Path,
                  mix: dict[str, float] | None = None) -> dict:
    mix = validate_mix(mix or {})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = build_vocabulary()
    vocab.to_file(out / "vocab.txt")
    counts: dict[str, int] = {}
    for i in range(n_scenes):
        built = build_scene(seed, i, mix)
        sdir = out / f"scene_{i:05d}"
        sdir.mkdir(exist_ok=True)
        write_ppm(sdir / "rgb.ppm", built.sample.rgb)
        write_pfm(sdir / "depth.pfm", built.sample.depth)
        write_pgm(sdir / "mask.pgm", built.sample.mask)
        with open(sdir / "meta.json", "w") as f:
            json.dump(built.meta, f, sort_keys=True, indent=1)
        with open(sdir / "qa.jsonl", "w") as f:
            for rec in built.records:
                vocab.encode(rec.prompt)  # fail fast on vocabulary drift
                vocab.encode(rec.answer)
                f.write(rec.to_json() + "\n")
        for rec in built.records:
            counts[rec.task_type] = counts.get(rec.task_type, 0) + 1
    manifest = {
        "format_version": FORMAT_VERSION,
        "global_seed": seed,
        "n_scenes": n_scenes,
        "total_records": sum(counts.values()),
        "vocab_sha256": vocab.sha256(),
        "rel_dir_convention": qa_mod.REL_DIR_CONVENTION,
        "mix": mix,
        "counts": counts,
    }
    write_manifest(out / "manifest.txt", manifest)
    return manifest


def write_manifest(path: Path, manifest: dict) -> None:
    lines = [
        f"format_version {manifest['format_version']}",
        f"global_seed {manifest['global_seed']}",
        f"n_scenes {manifest['n_scenes']}",
        f"total_records {manifest['total_records']}",
        f"vocab_sha256 {manifest['vocab_sha256']}",
        f"rel_dir_convention {manifest['rel_dir_convention']}",
    ]
    for task, w in sorted(manifest["mix"].items()):
        lines.append(f"mix.{task} {w}")
    for task, n in sorted(manifest["counts"].items()):
        lines.append(f"records.{task} {n}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict:
    manifest: dict = {"mix": {}, "counts": {}}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        key, value = line.split(" ", 1)
        if key.startswith("mix."):
            manifest["mix"][key[4:]] = float(value)
        elif key.startswith("records."):
            manifest["counts"][key[8:]] = int(value)
        elif key in ("format_version", "global_seed", "n_scenes", "total_records"):
            manifest[key] = int(value)
        else:
            manifest[key] = value
    return manifest


# ---------------------------------------------------------------------------
# load

@dataclass
class SceneEntry:
    scene_id: str
    scene: Scene
    meta: dict
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    records: list[QARecord]

    def depth_target(self, size: int = DEPTH_TARGET_SIZE) -> np.ndarray:
        """Mean-pooled metric depth at the generator resolution."""
        f = self.depth.shape[0] // size
        return self.depth.reshape(size, f, size, f).mean(axis=(1, 3))

    def foreground_target(self, size: int = DEPTH_TARGET_SIZE) -> np.ndarray:
        """Pixels whose full pooling block is one foreground object."""
        f = self.mask.shape[0] // size
        blocks = self.mask.reshape(size, f, size, f)
        nonzero = (blocks > 0).all(axis=(1, 3))
        same = (blocks == blocks[:, :1, :, :1]).all(axis=(1, 3))
        return nonzero & same


@dataclass
class LoadedDataset:
    root: Path
    manifest: dict
    scenes: list[SceneEntry]
    vocab_sha256: str

    def split(self, eval_frac: float = 0.16) -> tuple[list[SceneEntry], list[SceneEntry]]:
        n_eval = max(1, round(len(self.scenes) * eval_frac))
        return self.scenes[:-n_eval], self.scenes[-n_eval:]


def load_dataset(data_dir: str | Path) -> LoadedDataset:
    root = Path(data_dir)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"{root}: no manifest.txt (not a dataset directory)")
    manifest = read_manifest(root / "manifest.txt")
    scenes = []
    for sdir in sorted(root.glob("scene_*")):
        meta = json.loads((sdir / "meta.json").read_text())
        records = [QARecord.from_json(line)
                   for line in (sdir / "qa.jsonl").read_text().splitlines()]
        scenes.append(SceneEntry(
            scene_id=meta["scene_id"], scene=scene_from_meta(meta), meta=meta,
            rgb=read_ppm(sdir / "rgb.ppm"), depth=read_pfm(sdir / "depth.pfm"),
            mask=read_pgm(sdir / "mask.pgm"), records=records))
    return LoadedDataset(root=root, manifest=manifest, scenes=scenes,
                         vocab_sha256=manifest["vocab_sha256"])


# ---------------------------------------------------------------------------
# validation (the oracle re-check pass)

@dataclass
class ValidationReport:
    n_scenes: int = 0
    n_records: int = 0
    mismatches: list[str] = field(default_factory=list)
    max_depth_error: float = 0.0
    max_box_roundtrip_px: float = 0.0
    max_trace_unif_dev: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.mismatches

    def add(self, msg: str) -> None:
        self.mismatches.append(msg)


def _validate_record(entry: SceneEntry, rec: QARecord, report: ValidationReport, episode: Episode | None):
    scene = entry.scene
    sample = RenderedSample(rgb=entry.rgb, depth=entry.depth, mask=entry.mask)
    if rec.geometry:
        coords = []
        for v in rec.geometry.values():
            coords.extend(np.asarray(v).reshape(-1).tolist())
        if any(not (0 <= c <= 1000) for c in coords):
            report.add(f"{rec.scene_id}/{rec.task_type}: coordinates outside [0,1000]")
    if rec.task_type in qa_mod.SPATIAL_ORACLES:
        expected = qa_mod.SPATIAL_ORACLES[rec.task_type](scene, rec.args)
    elif rec.task_type == "ground_box":
        expected, geometry = qa_mod.oracle_ground_box(scene, sample, rec.args)
        oid = scene.by_category(rec.args["target"])[0].oid
        x0, y0, x1, y1 = qa_mod.mask_to_bbox(sample.mask, oid)
        res = sample.mask.shape[0]
        denorm = [qa_mod.denormalize_coords(v, res) for v in geometry["box"]]
        err = max(abs(a - b) for a, b in zip(denorm, (x0, y0, x1, y1)))
        report.max_box_roundtrip_px = max(report.max_box_roundtrip_px, err)
        if err > 1.0:
            report.add(f"{rec.scene_id}/ground_box: round-trip error {err:.2f} px")
    elif rec.task_type == "ground_point":
        expected, _ = qa_mod.oracle_ground_point(scene, sample, rec.args)
        px, py = rec.args["pixel"]
        oid = scene.by_category(rec.args["target"])[0].oid
        if sample.mask[py, px] != oid:
            report.add(f"{rec.scene_id}/ground_point: stored pixel not on object")
        res = sample.mask.shape[0]
        nx, ny = rec.geometry["point"]
        dx = int(round(qa_mod.denormalize_coords(nx, res)))
        dy = int(round(qa_mod.denormalize_coords(ny, res)))
        near = sample.mask[max(0, dy - 1):dy + 2, max(0, dx - 1):dx + 2]
        if not (near == oid).any():
            report.add(f"{rec.scene_id}/ground_point: denormalized point off the mask (>1 px)")
    elif rec.task_type in ("plan_done", "plan_next", "plan_first"):
        anchor = rec.args["anchor_step"]
        expected = {"plan_done": qa_mod.oracle_plan_done(episode, anchor),
                    "plan_next": qa_mod.oracle_plan_next(episode, anchor),
                    "plan_first": qa_mod.oracle_plan_first(episode)}[rec.task_type]
    elif rec.task_type == "trajectory":
        expected, geometry, resampled = qa_mod.oracle_trajectory(episode, rec.args["anchor_step"])
        if len(geometry["trace"]) != 6:
            report.add(f"{rec.scene_id}/trajectory: trace has {len(geometry['trace'])} points")
        path = episode.effector_pixels()[rec.args["anchor_step"]:]
        trace = TrajectoryTrace(points=path, resampled=resampled)
        arcs = arc_lengths_between(trace)
        dev = float(np.abs(arcs - arcs.mean()).max() / arcs.mean()) if arcs.mean() > 0 else 0.0
        report.max_trace_unif_dev = max(report.max_trace_unif_dev, dev)
        if dev > 0.01:
            report.add(f"{rec.scene_id}/trajectory: arc spacing deviates {dev:.3%}")
    else:
        report.add(f"{rec.scene_id}: unknown task_type {rec.task_type!r}")
        return
    if expected != rec.answer:
        report.add(f"{rec.scene_id}/{rec.task_type}: stored {rec.answer!r} != oracle {expected!r}")


def validate_dataset(data_dir: str | Path) -> ValidationReport:
    """Recompute every record from scene geometry; check depth-mask coherence."""
    ds = load_dataset(data_dir)
    report = ValidationReport(n_scenes=len(ds.scenes))
    for entry in ds.scenes:
        t_all = object_ray_params(entry.scene)
        fwd, _, _ = entry.scene.camera.basis()
        from .scenes import ray_grid
        _, dirs = ray_grid(entry.scene.camera, entry.mask.shape[0])
        axial = dirs @ fwd
        for obj in entry.scene.objects:
            sel = entry.mask == obj.oid
            if not sel.any():
                continue
            idx = [o.oid for o in entry.scene.objects].index(obj.oid)
            analytic = t_all[idx] * axial
            err = float(np.abs(analytic[sel] - entry.depth[sel]).max())
            report.max_depth_error = max(report.max_depth_error, err)
            if err > 1e-4:
                report.add(f"{entry.scene_id}: depth-mask coherence error {err:.2e} m (object {obj.oid})")
            if not np.isfinite(analytic[sel]).all():
                report.add(f"{entry.scene_id}: mask id {obj.oid} where object has no hit")
        bg = entry.mask == 0
        if bg.any() and float(np.abs(entry.depth[bg] - FAR_PLANE).max()) > 1e-4:
            report.add(f"{entry.scene_id}: background depth is not the far plane")
        episode = None
        if entry.meta.get("scene_type") == "episode":
            episode = run_episode(entry.meta["env_seed"])
        for rec in entry.records:
            report.n_records += 1
            _validate_record(entry, rec, report, episode)
    return report
