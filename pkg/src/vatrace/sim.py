"""Deterministic planar-arm simulator with reach/pick/stack/destack tasks."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .codec import quantize
from .domain import (
    Action,
    Actuation,
    CameraModel,
    ControlFrame,
    ControlMode,
    Episode,
    Frame,
    ProprioState,
    RobotType,
)
from .trace import BehindCameraError, project_point

DT = 0.05
LINK_LENGTHS = (0.4, 0.3, 0.2)
HOME_JOINTS = (1.2, 0.6, 0.6)
ROBOT_NAME = "PlanarArm"
DEFAULT_MODE = ControlMode(Actuation.JOINT_POSITION, ControlFrame.DELTA)

# object workspace, sampled uniformly per axis
WORKSPACE_X = (0.35, 0.75)
WORKSPACE_Y = (-0.35, 0.35)
MIN_RADIUS = 0.15
MIN_SEPARATION = 0.1
CUBE_SIZE = 0.04

BBOX_HALF_WIDTH = 4.0
MAX_JOINT_STEP = 0.08
ACTION_DECIMALS = 3
MAX_RESAMPLES = 100

BACKGROUND = 0
OBJECT_VALUE = 128
ARM_VALUE = 255


class TaskKind(str, enum.Enum):
    REACH = "reach"
    PICK = "pick"
    STACK = "stack"
    DESTACK = "destack"


INSTRUCTIONS = {
    TaskKind.REACH: "reach the target",
    TaskKind.PICK: "pick up the cube",
    TaskKind.STACK: "stack the cube on the base",
    TaskKind.DESTACK: "take the cube off the base",
}


class InfeasibleTask(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    target: Union[str, tuple[float, float]]
    epsilon: float = 0.02
    lift_height: float = 0.05
    base: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not isinstance(self.target, str):
            object.__setattr__(self, "target", (float(self.target[0]), float(self.target[1])))


@dataclass(frozen=True)
class ArmState:
    joints: tuple[float, ...]
    link_lengths: tuple[float, ...] = LINK_LENGTHS
    gripper: float = 1.0
    held_object: Optional[str] = None

    @property
    def ee(self) -> tuple[float, float]:
        return fk(self.joints, self.link_lengths)


@dataclass(frozen=True)
class SceneObject:
    id: str
    position: tuple[float, float]
    stacked_on: Optional[str] = None


@dataclass(frozen=True)
class SceneState:
    arm: ArmState
    objects: tuple[SceneObject, ...]
    task: TaskSpec
    step_count: int = 0
    # ids of objects that have rested on another object at any point
    was_stacked: frozenset[str] = field(default_factory=frozenset)

    def obj(self, oid: str) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)


# -- kinematics ---------------------------------------------------------------

def joint_positions(joints: Sequence[float], link_lengths: Sequence[float]) -> list[tuple[float, float]]:
    """Base followed by every joint/tip position, in metres."""
    if len(joints) != len(link_lengths) or len(joints) == 0:
        raise ValueError("need K >= 1 joints matching K link lengths")
    pts = [(0.0, 0.0)]
    x = y = theta = 0.0
    for q, length in zip(joints, link_lengths):
        theta += q
        x += length * math.cos(theta)
        y += length * math.sin(theta)
        pts.append((x, y))
    return pts


def fk(joints: Sequence[float], link_lengths: Sequence[float]) -> tuple[float, float]:
    return joint_positions(joints, link_lengths)[-1]


def _jacobian(joints: np.ndarray, links: np.ndarray) -> np.ndarray:
    cum = np.cumsum(joints)
    dx = -links * np.sin(cum)
    dy = links * np.cos(cum)
    # column k: derivative w.r.t. joint k affects links k..K-1
    jx = np.cumsum(dx[::-1])[::-1]
    jy = np.cumsum(dy[::-1])[::-1]
    return np.stack([jx, jy])


def ik(target: Sequence[float], seed_joints: Sequence[float], link_lengths: Sequence[float],
       tol: float = 1e-9, max_iter: int = 500) -> tuple[float, ...]:
    """Damped least-squares IK starting from ``seed_joints``."""
    links = np.asarray(link_lengths, dtype=float)
    goal = np.asarray(target, dtype=float)
    starts = [np.asarray(seed_joints, dtype=float)]
    # deterministic fallbacks if the first start stalls in a singularity
    starts += [np.asarray(seed_joints, dtype=float) + off for off in (0.3, -0.3, 0.9, -0.9)]
    for q in starts:
        q = q.copy()
        for _ in range(max_iter):
            err = goal - np.asarray(fk(q, links))
            if np.linalg.norm(err) < tol:
                return tuple(float(v) for v in q)
            jac = _jacobian(q, links)
            lam = 1e-3
            dq = jac.T @ np.linalg.solve(jac @ jac.T + lam * np.eye(2), err)
            q += dq
    raise InfeasibleTask(f"inverse kinematics failed for target {tuple(goal)}")


# -- stepping -----------------------------------------------------------------

def _apply_joints(arm: ArmState, values: Sequence[float], mode: ControlMode, dt: float) -> tuple[float, ...]:
    cur = arm.joints
    if mode.actuation is Actuation.JOINT_VELOCITY:
        return tuple(q + v * dt for q, v in zip(cur, values))
    if mode.actuation is Actuation.JOINT_POSITION:
        if mode.frame is ControlFrame.DELTA:
            return tuple(q + d for q, d in zip(cur, values))
        return tuple(float(v) for v in values)
    raise ValueError(f"control mode {mode} is not supported by the planar arm")


def _tops(objects: Sequence[SceneObject], exclude: Optional[str] = None) -> list[SceneObject]:
    covered = {o.stacked_on for o in objects if o.stacked_on is not None}
    return [o for o in objects if o.id not in covered and o.id != exclude]


def _dist(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def step(s: SceneState, a: Union[Action, Sequence[float]], mode: ControlMode = DEFAULT_MODE,
         dt: float = DT) -> SceneState:
    values = a.values if isinstance(a, Action) else tuple(float(v) for v in a)
    k = len(s.arm.joints)
    if len(values) != k + 1:
        raise ValueError(f"action arity {len(values)} does not match {k} joints + gripper")
    joints = _apply_joints(s.arm, values[:k], mode, dt)
    grip_cmd = min(max(float(values[k]), 0.0), 1.0)
    ee = fk(joints, s.arm.link_lengths)
    eps = s.task.epsilon

    held = s.arm.held_object
    objects = list(s.objects)
    was_stacked = set(s.was_stacked)
    closing = s.arm.gripper >= 0.5 > grip_cmd
    opening = s.arm.gripper < 0.5 <= grip_cmd

    if closing and held is None:
        candidates = [o for o in _tops(objects) if _dist(o.position, ee) <= eps]
        if candidates:
            pick = min(candidates, key=lambda o: (_dist(o.position, ee), o.id))
            held = pick.id
            objects = [replace(o, stacked_on=None) if o.id == held else o for o in objects]

    if held is not None:
        objects = [replace(o, position=ee) if o.id == held else o for o in objects]

    if opening and held is not None:
        landing = [o for o in _tops(objects, exclude=held) if _dist(o.position, ee) <= eps]
        if landing:
            base = min(landing, key=lambda o: (_dist(o.position, ee), o.id))
            objects = [replace(o, stacked_on=base.id, position=base.position) if o.id == held else o
                       for o in objects]
            was_stacked.add(held)
        held = None

    arm = ArmState(joints, s.arm.link_lengths, grip_cmd, held)
    return SceneState(arm, tuple(objects), s.task, s.step_count + 1, frozenset(was_stacked))


def success(s: SceneState) -> bool:
    task = s.task
    if task.kind is TaskKind.REACH:
        return _dist(s.arm.ee, task.target) <= task.epsilon  # type: ignore[arg-type]
    try:
        target = s.obj(task.target)  # type: ignore[arg-type]
    except KeyError:
        return False
    held = s.arm.held_object == target.id
    if task.kind is TaskKind.PICK:
        return held and s.arm.gripper < 0.5
    if task.kind is TaskKind.STACK:
        return not held and target.stacked_on is not None and target.stacked_on == task.base
    if task.kind is TaskKind.DESTACK:
        return target.id in s.was_stacked and not held and target.stacked_on is None
    return False


# -- scene sampling and scripted demonstrations -------------------------------

def _sample_point(rng: np.random.Generator, reach: float, avoid: Sequence[tuple[float, float]] = ()):
    for _ in range(MAX_RESAMPLES):
        p = (float(rng.uniform(*WORKSPACE_X)), float(rng.uniform(*WORKSPACE_Y)))
        r = math.hypot(*p)
        if MIN_RADIUS <= r <= reach - 0.02 and all(_dist(p, q) >= MIN_SEPARATION for q in avoid):
            return p
    raise InfeasibleTask("no feasible placement after bounded resampling")


def initial_scene(kind: Union[TaskKind, str], seed: int, link_lengths: Sequence[float] = LINK_LENGTHS,
                  epsilon: float = 0.02) -> SceneState:
    """Seeded initial scene; the same (kind, seed) always yields the same scene."""
    kind = TaskKind(kind)
    links = tuple(float(v) for v in link_lengths)
    home = _home_joints(len(links))
    arm = ArmState(home, links, 1.0, None)
    reach = sum(links)
    rng = np.random.default_rng(seed)
    home_ee = fk(home, links)
    if kind is TaskKind.REACH:
        target = _sample_point(rng, reach, avoid=[home_ee])
        return SceneState(arm, (), TaskSpec(kind, target, epsilon))
    if kind is TaskKind.PICK:
        cube = _sample_point(rng, reach, avoid=[home_ee])
        return SceneState(arm, (SceneObject("cube", cube),), TaskSpec(kind, "cube", epsilon))
    if kind is TaskKind.STACK:
        cube = _sample_point(rng, reach, avoid=[home_ee])
        base = _sample_point(rng, reach, avoid=[home_ee, cube])
        objs = (SceneObject("base", base), SceneObject("cube", cube))
        return SceneState(arm, objs, TaskSpec(kind, "cube", epsilon, base="base"))
    base = _sample_point(rng, reach, avoid=[home_ee])
    objs = (SceneObject("base", base), SceneObject("cube", base, stacked_on="base"))
    return SceneState(arm, objs, TaskSpec(kind, "cube", epsilon, base="base"), was_stacked=frozenset({"cube"}))


def _home_joints(k: int) -> tuple[float, ...]:
    if k == len(HOME_JOINTS):
        return HOME_JOINTS
    return (1.2,) + (0.6,) * (k - 1)


def _free_spot(scene: SceneState, seed: int) -> tuple[float, float]:
    rng = np.random.default_rng([seed, 1])
    avoid = [o.position for o in scene.objects] + [scene.arm.ee]
    return _sample_point(rng, sum(scene.arm.link_lengths), avoid)


@dataclass
class Demo:
    episode: Episode
    scenes: list[SceneState]
    actions: list[Action]


class _Scripter:
    def __init__(self, scene: SceneState, mode: ControlMode, dt: float, decimals: int):
        self.scene = scene
        self.mode = mode
        self.dt = dt
        self.decimals = decimals
        self.scenes = [scene]
        self.actions: list[Action] = []
        self.grip = 1.0

    def _do(self, joint_part: Sequence[float]):
        act = Action(tuple(joint_part) + (self.grip,))
        self.scene = step(self.scene, act, self.mode, self.dt)
        self.actions.append(act)
        self.scenes.append(self.scene)

    def move_to(self, target):
        goal = np.asarray(ik(target, self.scene.arm.joints, self.scene.arm.link_lengths))
        cur = np.asarray(self.scene.arm.joints)
        goal = cur + (goal - cur + np.pi) % (2 * np.pi) - np.pi
        for _ in range(2000):
            cur = np.asarray(self.scene.arm.joints)
            if self.mode.actuation is Actuation.JOINT_POSITION and self.mode.frame is ControlFrame.ABSOLUTE:
                nxt = cur + np.clip(goal - cur, -MAX_JOINT_STEP, MAX_JOINT_STEP)
                cmd = [quantize(v, self.decimals) for v in nxt]
                if np.array_equal(np.asarray(cmd), cur):
                    return
            else:
                delta = np.clip(goal - cur, -MAX_JOINT_STEP, MAX_JOINT_STEP)
                if self.mode.actuation is Actuation.JOINT_VELOCITY:
                    delta = delta / self.dt
                cmd = [quantize(v, self.decimals) for v in delta]
                if not any(cmd):
                    return
            self._do(cmd)
        raise InfeasibleTask("scripted controller did not converge")

    def hold_cmd(self) -> list[float]:
        if self.mode.actuation is Actuation.JOINT_POSITION and self.mode.frame is ControlFrame.ABSOLUTE:
            return list(self.scene.arm.joints)
        return [0.0] * len(self.scene.arm.joints)

    def set_gripper(self, value: float):
        self.grip = value
        self._do(self.hold_cmd())


def generate_demo(kind: Union[TaskKind, str], seed: int, mode: ControlMode = DEFAULT_MODE,
                  link_lengths: Sequence[float] = LINK_LENGTHS, camera: Optional[CameraModel] = None,
                  dt: float = DT, decimals: int = ACTION_DECIMALS, epsilon: float = 0.02) -> Demo:
    """Scripted successful demonstration for ``kind`` under ``seed``.

    Commands are quantized to ``decimals`` before execution, so replaying the
    recorded actions through the text codec reproduces the trajectory exactly.
    """
    kind = TaskKind(kind)
    if mode.actuation is Actuation.END_EFFECTOR_POSE:
        raise ValueError("scripted demos need a joint-space control mode")
    camera = camera or default_camera()
    scene = initial_scene(kind, seed, link_lengths, epsilon)
    sc = _Scripter(scene, mode, dt, decimals)
    if kind is TaskKind.REACH:
        sc.move_to(scene.task.target)
    elif kind is TaskKind.PICK:
        sc.move_to(scene.obj("cube").position)
        sc.set_gripper(0.0)
    elif kind is TaskKind.STACK:
        sc.move_to(scene.obj("cube").position)
        sc.set_gripper(0.0)
        sc.move_to(scene.obj("base").position)
        sc.set_gripper(1.0)
    else:
        spot = _free_spot(scene, seed)
        sc.move_to(scene.obj("cube").position)
        sc.set_gripper(0.0)
        sc.move_to(spot)
        sc.set_gripper(1.0)
    if not success(sc.scene):
        raise InfeasibleTask(f"scripted {kind.value} demo for seed {seed} did not succeed")
    episode = _to_episode(kind, seed, mode, camera, sc.scenes, sc.actions)
    return Demo(episode, sc.scenes, sc.actions)


def scripted_demo(task: Union[TaskSpec, TaskKind, str], seed: int, **kwargs) -> Episode:
    kind = task.kind if isinstance(task, TaskSpec) else TaskKind(task)
    if isinstance(task, TaskSpec):
        kwargs.setdefault("epsilon", task.epsilon)
    return generate_demo(kind, seed, **kwargs).episode


def episode_id(kind: TaskKind, seed: int) -> str:
    return f"{kind.value}-{seed:06d}"


def image_ref(ep_id: str, t: int) -> str:
    return f"images/{ep_id}/frame-{t:04d}.pgm"


def _to_episode(kind: TaskKind, seed: int, mode: ControlMode, cam: CameraModel,
                scenes: list[SceneState], actions: list[Action]) -> Episode:
    ep_id = episode_id(kind, seed)
    frames = []
    for i, sc in enumerate(scenes, start=1):
        ee = sc.arm.ee
        u, v = project_point((ee[0], ee[1], 0.0), cam, i)
        w = BBOX_HALF_WIDTH
        frames.append(Frame(
            index=i,
            image_ref=image_ref(ep_id, i),
            state=ProprioState(sc.arm.joints, sc.arm.gripper),
            action=actions[i - 1] if i <= len(actions) else None,
            ee_pos_3d=(ee[0], ee[1], 0.0),
            ee_bbox=(u - w, v - w, u + w, v + w),
        ))
    return Episode(
        id=ep_id,
        subset=f"sim_{kind.value}",
        robot=RobotType(ROBOT_NAME),
        mode=mode,
        instruction=INSTRUCTIONS[kind],
        frames=tuple(frames),
        camera=cam,
    )


# -- camera and rendering -------------------------------------------------------

def default_camera(width: int = 128, height: int = 128, height_m: float = 2.0, focal: float = 120.0) -> CameraModel:
    """Overhead camera above the arm base looking down at the table plane."""
    extrinsic = (
        (1.0, 0.0, 0.0, 0.0),
        (0.0, -1.0, 0.0, 0.0),
        (0.0, 0.0, -1.0, height_m),
        (0.0, 0.0, 0.0, 1.0),
    )
    return CameraModel(focal, focal, (width - 1) / 2, (height - 1) / 2, extrinsic, width, height)


def pixel_of(u: float, v: float) -> tuple[int, int]:
    """Nearest pixel (column, row) for continuous image coordinates."""
    return int(math.floor(u + 0.5)), int(math.floor(v + 0.5))


def _draw_line(img: np.ndarray, p0: tuple[int, int], p1: tuple[int, int], value: int):
    h, w = img.shape
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            img[y0, x0] = value
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def rasterize(width: int, height: int, segments=(), squares=(), background: int = BACKGROUND) -> np.ndarray:
    """Draw filled squares ``(u, v, half_px)`` then line segments ``((u0, v0), (u1, v1))``."""
    img = np.full((height, width), background, dtype=np.uint8)
    for u, v, half in squares:
        c, r = pixel_of(u, v)
        img[max(r - half, 0):max(r + half + 1, 0), max(c - half, 0):max(c + half + 1, 0)] = OBJECT_VALUE
    for a, b in segments:
        _draw_line(img, pixel_of(*a), pixel_of(*b), ARM_VALUE)
    return img


def render(s: SceneState, cam: CameraModel) -> np.ndarray:
    segments = []
    pts = joint_positions(s.arm.joints, s.arm.link_lengths)
    try:
        px = [project_point((x, y, 0.0), cam) for x, y in pts]
        segments = list(zip(px[:-1], px[1:]))
    except BehindCameraError:
        segments = []
    squares = []
    for o in s.objects:
        try:
            u, v = project_point((o.position[0], o.position[1], 0.0), cam)
        except BehindCameraError:
            continue
        depth = cam.matrix[2] @ np.array([o.position[0], o.position[1], 0.0, 1.0])
        half = max(1, int(round(cam.fx * CUBE_SIZE / 2 / depth)))
        squares.append((u, v, half))
    return rasterize(cam.width, cam.height, segments, squares)


def encode_pgm(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError("not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_demo(demo: Demo, root: Union[Path, str]) -> Path:
    """Write the episode JSON and one PGM per frame under ``root``."""
    from .domain import save_episode

    root = Path(root)
    ep = demo.episode
    cam = ep.camera or default_camera()
    for fr, sc in zip(ep.frames, demo.scenes):
        path = root / fr.image_ref
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_pgm(render(sc, cam)))
    return save_episode(ep, root / "episodes" / ep.subset / f"{ep.id}.json")


# -- environment wrapper --------------------------------------------------------

class PlanarArmEnv:
    """Stateful wrapper around :func:`step` used for closed-loop evaluation."""

    def __init__(self, task: Union[TaskKind, str], mode: ControlMode = DEFAULT_MODE,
                 link_lengths: Sequence[float] = LINK_LENGTHS, camera: Optional[CameraModel] = None,
                 dt: float = DT, epsilon: float = 0.02):
        self.task = TaskKind(task)
        self.mode = mode
        self.link_lengths = tuple(link_lengths)
        self.camera = camera or default_camera()
        self.dt = dt
        self.epsilon = epsilon
        self.scene: Optional[SceneState] = None

    @property
    def robot(self) -> RobotType:
        return RobotType(ROBOT_NAME)

    @property
    def instruction(self) -> str:
        return INSTRUCTIONS[self.task]

    def reset(self, seed: int) -> SceneState:
        self.scene = initial_scene(self.task, seed, self.link_lengths, self.epsilon)
        return self.scene

    def step(self, action: Union[Action, Sequence[float]]) -> SceneState:
        assert self.scene is not None, "call reset() first"
        self.scene = step(self.scene, action, self.mode, self.dt)
        return self.scene

    def success(self) -> bool:
        return self.scene is not None and success(self.scene)

    def proprio(self) -> ProprioState:
        assert self.scene is not None, "call reset() first"
        return ProprioState(self.scene.arm.joints, self.scene.arm.gripper)

    def render(self) -> np.ndarray:
        assert self.scene is not None, "call reset() first"
        return render(self.scene, self.camera)
