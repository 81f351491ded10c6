"""Deterministic 2D manipulation environment with a scripted expert.

One manipulable object, one goal zone, a point effector on the unit square.
Actions are (dx, dy, gripper); per-step motion is clamped to 0.1, gripper
> 0 within GRASP_RADIUS of the object grasps it, <= 0 releases. Episodes
carry ordered sub-task labels; progress is the number of completed
sub-tasks. States render to top-down 3D scenes so observations come with
exact depth maps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .rng import RngStream
from .scenes import RES, Camera, Scene, SceneObject, RenderedSample, category_name, CATEGORIES, project_point, render

MAX_STEP = 0.1
GRASP_RADIUS = 0.05
GOAL_HALF = 0.10
EPISODE_HORIZON = 40

# env unit square -> world meters (top-down room)
ENV_SCALE = 1.8
ENV_OFFSET = 0.3
CAM_HEIGHT = 2.6

PICK_PLACE_LABELS = ("reach", "grasp", "move", "release")
PLACE_HELD_LABELS = ("move", "release")


@dataclass(frozen=True)
class ToyEnvState:
    effector: tuple[float, float]
    object_xy: tuple[float, float]
    object_category: str
    goal_center: tuple[float, float]
    held: bool
    labels: tuple[str, ...]
    completed: int
    step_count: int

    @property
    def success(self) -> bool:
        return self.completed == len(self.labels)

    @property
    def progress(self) -> float:
        return self.completed / len(self.labels)


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def in_goal(state: ToyEnvState, xy) -> bool:
    return (abs(xy[0] - state.goal_center[0]) <= GOAL_HALF
            and abs(xy[1] - state.goal_center[1]) <= GOAL_HALF)


def env_reset(seed: int) -> ToyEnvState:
    stream = RngStream(seed, "toyenv")
    color, kind = CATEGORIES[int(stream.integers(0, len(CATEGORIES)))]
    category = category_name(color, kind)
    obj = (float(stream.uniform(0.15, 0.85)), float(stream.uniform(0.15, 0.85)))
    for _ in range(100):
        goal = (float(stream.uniform(0.2, 0.8)), float(stream.uniform(0.2, 0.8)))
        if _dist(goal, obj) >= 0.4:
            break
    for _ in range(100):
        eff = (float(stream.uniform(0.1, 0.9)), float(stream.uniform(0.1, 0.9)))
        if _dist(eff, obj) >= 0.2:
            break
    held = bool(stream.uniform() < 0.2)
    if held:
        obj = eff
        labels = PLACE_HELD_LABELS
    else:
        labels = PICK_PLACE_LABELS
    state = ToyEnvState(effector=eff, object_xy=obj, object_category=category,
                        goal_center=goal, held=held, labels=labels,
                        completed=0, step_count=0)
    return _score(state)


def _predicate(state: ToyEnvState, label: str) -> bool:
    if label == "reach":
        return _dist(state.effector, state.object_xy) <= GRASP_RADIUS
    if label == "grasp":
        return state.held
    if label == "move":
        return state.held and in_goal(state, state.object_xy)
    if label == "release":
        return (not state.held) and in_goal(state, state.object_xy)
    raise ValueError(f"unknown sub-task label {label!r}")


def _score(state: ToyEnvState) -> ToyEnvState:
    completed = state.completed
    while completed < len(state.labels) and _predicate(state, state.labels[completed]):
        completed += 1
    return replace(state, completed=completed)


def env_step(state: ToyEnvState, action) -> ToyEnvState:
    dx = float(np.clip(action[0], -MAX_STEP, MAX_STEP))
    dy = float(np.clip(action[1], -MAX_STEP, MAX_STEP))
    g = float(np.clip(action[2], -1.0, 1.0))
    eff = (float(np.clip(state.effector[0] + dx, 0.0, 1.0)),
           float(np.clip(state.effector[1] + dy, 0.0, 1.0)))
    held = state.held
    obj = eff if held else state.object_xy
    if g > 0 and not held and _dist(eff, obj) <= GRASP_RADIUS:
        held = True
        obj = eff
    elif g <= 0 and held:
        held = False
    nxt = replace(state, effector=eff, object_xy=obj, held=held,
                  step_count=state.step_count + 1)
    return _score(nxt)


def scripted_expert_action(state: ToyEnvState) -> np.ndarray:
    """Straight-line planner over the remaining sub-tasks."""
    if state.success:
        return np.array([0.0, 0.0, -1.0])
    label = state.labels[state.completed]
    if label == "reach":
        return np.append(_step_toward(state.effector, state.object_xy), -1.0)
    if label == "grasp":
        return np.array([0.0, 0.0, 1.0])
    if label == "move":
        return np.append(_step_toward(state.effector, state.goal_center), 1.0)
    return np.array([0.0, 0.0, -1.0])  # release


def _step_toward(src, dst) -> np.ndarray:
    delta = np.array([dst[0] - src[0], dst[1] - src[1]])
    n = float(np.linalg.norm(delta))
    if n <= MAX_STEP:
        return delta
    return delta / n * MAX_STEP


@dataclass
class Episode:
    env_seed: int
    states: list[ToyEnvState]       # length T+1 (includes the final state)
    actions: np.ndarray             # (T, 3)
    labels: tuple[str, ...]
    instruction: str
    success: bool

    def completed_at(self, step: int) -> int:
        return self.states[step].completed

    def effector_pixels(self, res: int = RES) -> np.ndarray:
        cam = env_camera()
        pts = []
        for s in self.states:
            world = env_world_point(s.effector, z=0.35)
            pts.append(project_point(cam, world, res))
        return np.asarray(pts)

    @property
    def horizon(self) -> int:
        return len(self.actions)


def instruction_for(state: ToyEnvState) -> str:
    if state.labels == PLACE_HELD_LABELS:
        return f"place the held {state.object_category} into the goal zone"
    return f"put the {state.object_category} into the goal zone"


def observation_text(state: ToyEnvState) -> str:
    """Instruction plus gripper proprioception (the policy's text input)."""
    return f"{instruction_for(state)} gripper {'holding' if state.held else 'empty'}"


def run_episode(seed: int, horizon: int = EPISODE_HORIZON, policy=None) -> Episode:
    """Roll the scripted expert (or a policy callback) until success/horizon."""
    state = env_reset(seed)
    states = [state]
    actions = []
    for _ in range(horizon):
        a = scripted_expert_action(state) if policy is None else policy(state)
        state = env_step(state, a)
        states.append(state)
        actions.append(np.asarray(a, dtype=np.float64))
        if policy is None and state.success:
            break
    return Episode(env_seed=seed, states=states,
                   actions=np.asarray(actions).reshape(-1, 3),
                   labels=states[0].labels, instruction=instruction_for(states[0]),
                   success=states[-1].success)


# ---------------------------------------------------------------------------
# top-down rendering of env states

def env_world_point(xy, z: float = 0.0) -> np.ndarray:
    return np.array([ENV_OFFSET + xy[0] * ENV_SCALE, ENV_OFFSET + xy[1] * ENV_SCALE, z])


def env_camera() -> Camera:
    return Camera(position=np.array([1.2, 1.2, CAM_HEIGHT]),
                  look_at=np.array([1.2, 1.2, 0.0]))


def env_scene(state: ToyEnvState, seed: int = 0) -> Scene:
    color, kind = state.object_category.split("-")
    if kind == "ball":
        obj = SceneObject(oid=1, kind="sphere", center=env_world_point(state.object_xy, z=0.10),
                          size=np.array([0.10]), color=color, category=state.object_category)
    else:
        obj = SceneObject(oid=1, kind="box", center=env_world_point(state.object_xy, z=0.10),
                          size=np.array([0.10, 0.10, 0.10]), color=color, category=state.object_category)
    # the gripper state must be observable: the effector darkens while holding
    effector = SceneObject(oid=2, kind="sphere", center=env_world_point(state.effector, z=0.35),
                           size=np.array([0.08]), color="gray" if state.held else "white",
                           category="effector")
    # goal slab sits almost flush with the floor so its center keeps clearance
    goal = SceneObject(oid=3, kind="box",
                       center=env_world_point(state.goal_center, z=-0.11),
                       size=np.array([GOAL_HALF * ENV_SCALE, GOAL_HALF * ENV_SCALE, 0.12]),
                       color="teal", category="goal zone")
    return Scene(room=np.array([2.4, 2.4, 3.2]), camera=env_camera(),
                 objects=[obj, effector, goal],
                 room_min=np.array([0.0, 0.0, -0.3]),
                 scene_id=f"env-{seed}-{state.step_count}", seed=seed)


def render_env(state: ToyEnvState, seed: int = 0) -> RenderedSample:
    return render(env_scene(state, seed))
