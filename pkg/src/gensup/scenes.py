"""Synthetic 3D scenes with analytic rendering.

A scene is a room-sized box containing 2-8 primitive objects (spheres and
boxes resting on the floor) seen by a fixed-FOV pinhole camera. Rendering
casts one primary ray per pixel; the nearest hit wins. Depth is the
camera-axis distance of the hit, background pixels carry the far plane.
Everything is closed-form, so rendered depth and masks double as exact
oracles for the QA generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream

FAR_PLANE = 6.8
FOV_DEG = 60.0
RES = 64
MIN_VISIBLE_PIX = 10
BG_RGB = 0.06
MIN_CENTER_DIST = 0.2

COLOR_RGB = {
    "red": (0.85, 0.12, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.12, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.12),
    "purple": (0.60, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.92, 0.92, 0.92),
    "gray": (0.45, 0.45, 0.45),
    "teal": (0.10, 0.75, 0.75),
}

# the six dataset object categories: color is one-to-one with (color, kind)
CATEGORIES = (
    ("red", "ball"),
    ("green", "ball"),
    ("blue", "ball"),
    ("yellow", "box"),
    ("purple", "box"),
    ("orange", "box"),
)


def category_name(color: str, kind: str) -> str:
    return f"{color}-{kind}"


@dataclass
class SceneObject:
    oid: int                      # 1-based; 0 is background in masks
    kind: str                     # "sphere" | "box"
    center: np.ndarray            # (3,) meters
    size: np.ndarray              # sphere: (1,) radius; box: (3,) half extents
    color: str
    category: str

    @property
    def max_extent(self) -> float:
        """Longest dimension in meters (diameter / full edge)."""
        return float(2.0 * self.size.max())


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    fov_deg: float = FOV_DEG

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        up_hint = np.array([0.0, 0.0, 1.0])
        if abs(float(fwd @ up_hint)) > 0.99:
            up_hint = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up_hint)
        right = right / np.linalg.norm(right)
        up = np.cross(right, fwd)
        return fwd, right, up


@dataclass
class Scene:
    room: np.ndarray              # (3,) extents in meters
    camera: Camera
    objects: list[SceneObject]
    room_min: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scene_id: str = ""
    seed: int = 0

    def by_id(self, oid: int) -> SceneObject:
        for obj in self.objects:
            if obj.oid == oid:
                return obj
        raise KeyError(f"no object with id {oid}")

    def by_category(self, category: str) -> list[SceneObject]:
        return [o for o in self.objects if o.category == category]

    def floor_area(self) -> float:
        return float(self.room[0] * self.room[1])


@dataclass
class RenderedSample:
    rgb: np.ndarray     # (res, res, 3) float32 in [0,1]
    depth: np.ndarray   # (res, res) float32 meters, camera-axis distance
    mask: np.ndarray    # (res, res) uint8 object ids, 0 = background


def ray_grid(camera: Camera, res: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center ray directions, (res, res, 3) unit vectors, row-major."""
    fwd, right, up = camera.basis()
    tan_half = math.tan(math.radians(camera.fov_deg) / 2.0)
    px = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    ndc_y, ndc_x = np.meshgrid(px, px, indexing="ij")  # rows down, cols right
    dirs = (fwd[None, None]
            + ndc_x[..., None] * tan_half * right[None, None]
            - ndc_y[..., None] * tan_half * up[None, None])
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    return camera.position.copy(), dirs


def project_point(camera: Camera, point: np.ndarray, res: int) -> tuple[float, float]:
    """World point -> continuous (x=col, y=row) pixel coordinates.

    Exact inverse of the ray_grid pixel-center construction.
    """
    fwd, right, up = camera.basis()
    tan_half = math.tan(math.radians(camera.fov_deg) / 2.0)
    rel = np.asarray(point, dtype=np.float64) - camera.position
    z = float(rel @ fwd)
    if z <= 1e-9:
        raise ValueError("point behind the camera")
    ndc_x = float(rel @ right) / (z * tan_half)
    ndc_y = -float(rel @ up) / (z * tan_half)
    col = (ndc_x + 1.0) / 2.0 * res - 0.5
    row = (ndc_y + 1.0) / 2.0 * res - 0.5
    return col, row


def intersect_sphere(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Ray parameter of the nearest forward hit; +inf where the ray misses."""
    oc = origin - center
    b = dirs @ oc
    c = float(oc @ oc) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = -b - sq
    t_far = -b + sq
    t = np.where(t_near > 1e-6, t_near, t_far)
    return np.where(hit & (t > 1e-6), t, np.inf)


def intersect_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    t_near = np.nanmax(np.minimum(t0, t1), axis=-1)
    t_far = np.nanmin(np.maximum(t0, t1), axis=-1)
    hit = (t_near <= t_far) & (t_far > 1e-6)
    t = np.where(t_near > 1e-6, t_near, t_far)
    return np.where(hit, t, np.inf)


def object_ray_params(scene: Scene, res: int = RES) -> np.ndarray:
    """(n_objects, res, res) ray parameters per object; the occlusion oracle."""
    origin, dirs = ray_grid(scene.camera, res)
    out = np.full((len(scene.objects), res, res), np.inf)
    for i, obj in enumerate(scene.objects):
        if obj.kind == "sphere":
            out[i] = intersect_sphere(origin, dirs, obj.center, float(obj.size[0]))
        elif obj.kind == "box":
            out[i] = intersect_box(origin, dirs, obj.center - obj.size, obj.center + obj.size)
        else:
            raise ValueError(f"unknown object kind {obj.kind!r}")
    return out


def render(scene: Scene, res: int = RES) -> RenderedSample:
    origin, dirs = ray_grid(scene.camera, res)
    fwd, _, _ = scene.camera.basis()
    axial = dirs @ fwd  # cosine between ray and camera axis, > 0
    t_all = object_ray_params(scene, res)
    nearest = t_all.argmin(axis=0)
    t_min = t_all.min(axis=0)
    hit = np.isfinite(t_min)
    depth = np.where(hit, t_min * axial, FAR_PLANE).astype(np.float32)
    mask = np.zeros((res, res), dtype=np.uint8)
    rgb = np.full((res, res, 3), BG_RGB, dtype=np.float32)
    atten = np.clip(1.0 - 0.07 * depth, 0.35, 1.0)
    for i, obj in enumerate(scene.objects):
        sel = hit & (nearest == i)
        mask[sel] = obj.oid
        rgb[sel] = np.asarray(COLOR_RGB[obj.color], dtype=np.float32)
    rgb *= atten[..., None].astype(np.float32)
    rgb[~hit] = BG_RGB
    return RenderedSample(rgb=rgb, depth=depth, mask=mask)


def visible_pixels(sample: RenderedSample) -> dict[int, int]:
    ids, counts = np.unique(sample.mask, return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts) if i != 0}


def visible_counts(scene: Scene, res: int = RES) -> dict[int, int]:
    """Mask pixel counts per object id without shading (fast path for gen)."""
    t_all = object_ray_params(scene, res)
    nearest = t_all.argmin(axis=0)
    hit = np.isfinite(t_all.min(axis=0))
    out: dict[int, int] = {}
    for i, obj in enumerate(scene.objects):
        out[obj.oid] = int((hit & (nearest == i)).sum())
    return out


class SceneGenerationError(RuntimeError):
    pass


def gen_scene(seed: int, max_attempts: int = 1000) -> Scene:
    """Deterministic scene from a single integer seed (rejection sampling).

    Accepts only layouts where every object is visible with at least
    MIN_VISIBLE_PIX mask pixels, which implies the camera sees >= 2 objects.
    """
    stream = RngStream(seed, "scenegen")
    for _ in range(max_attempts):
        scene = _propose_scene(stream, seed)
        if scene is None:
            continue
        vis = visible_counts(scene)
        if all(vis.get(o.oid, 0) >= MIN_VISIBLE_PIX for o in scene.objects):
            return scene
    raise SceneGenerationError(f"no valid scene after {max_attempts} attempts (seed {seed})")


def _propose_scene(stream: RngStream, seed: int) -> Scene | None:
    room = np.array([
        stream.uniform(4.5, 6.0),
        stream.uniform(4.5, 6.0),
        stream.uniform(2.6, 3.2),
    ])
    cam_pos = np.array([
        room[0] * stream.uniform(0.3, 0.7),
        0.35,
        stream.uniform(1.3, 1.7),
    ])
    look_at = np.array([
        room[0] * stream.uniform(0.35, 0.65),
        room[1] * stream.uniform(0.45, 0.70),
        stream.uniform(0.6, 1.1),
    ])
    # skewed toward richer scenes; 2 and 3 objects stay possible
    u = float(stream.uniform())
    n_objects = 2 + int(np.searchsorted(np.cumsum([0.08, 0.12, 0.16, 0.16, 0.16, 0.16, 0.16]), u))
    n_objects = min(n_objects, 8)
    n_cats = int(stream.integers(2, min(4, n_objects) + 1))
    cat_pool = [CATEGORIES[int(i)] for i in stream.choice(len(CATEGORIES), n_cats)]
    objects: list[SceneObject] = []
    for oid in range(1, n_objects + 1):
        color, kind = cat_pool[int(stream.integers(0, n_cats))]
        placed = False
        for _ in range(40):
            if kind == "ball":
                size = np.array([stream.uniform(0.26, 0.46)])
                reach = float(size[0])
                shape = "sphere"
            else:
                size = np.array([stream.uniform(0.22, 0.46),
                                 stream.uniform(0.22, 0.46),
                                 stream.uniform(0.22, 0.46)])
                reach = float(size.max())
                shape = "box"
            center = np.array([
                stream.uniform(0.6, room[0] - 0.6),
                stream.uniform(2.0, room[1] - 0.6),
                reach if shape == "sphere" else float(size[2]),
            ])
            ok = True
            for other in objects:
                gap = float(np.linalg.norm(center - other.center))
                other_reach = float(other.size.max())
                if gap < max(MIN_CENTER_DIST, 0.85 * (reach + other_reach)):
                    ok = False
                    break
            if ok:
                objects.append(SceneObject(
                    oid=oid, kind=shape, center=center, size=size,
                    color=color, category=category_name(color, kind)))
                placed = True
                break
        if not placed:
            return None
    scene = Scene(room=room, camera=Camera(position=cam_pos, look_at=look_at),
                  objects=objects, scene_id=f"scene-{seed}", seed=seed)
    return scene
