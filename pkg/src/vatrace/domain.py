"""Shared episode types, validation, and the on-disk JSON episode format."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

Point2D = tuple[float, float]
BBox = tuple[float, float, float, float]

DEFAULT_ROBOTS = (
    "Franka",
    "Sawyer",
    "xArm",
    "UR5",
    "WidowX",
    "Kuka iiwa",
    "Jaco",
    "Google Robot",
    "Hello Stretch",
    "PR2",
    "Baxter",
    "DLR EDAN",
    "PlanarArm",
)

_ROBOT_REGISTRY: set[str] = set(DEFAULT_ROBOTS)

# A robot name may not contain this fragment, otherwise rendered prompts
# could not be split back into their fields.
_RESERVED_ROBOT_FRAGMENT = " robot using "


def register_robot(name: str) -> None:
    RobotType(name)
    _ROBOT_REGISTRY.add(name)


def robot_registry() -> frozenset[str]:
    return frozenset(_ROBOT_REGISTRY)


def reset_robot_registry(names: Iterable[str] = DEFAULT_ROBOTS) -> None:
    _ROBOT_REGISTRY.clear()
    for name in names:
        register_robot(name)


@dataclass(frozen=True)
class RobotType:
    name: str

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name.strip():
            raise ValueError("robot type name must be a non-empty string")
        if "\n" in self.name or _RESERVED_ROBOT_FRAGMENT in self.name:
            raise ValueError(f"robot type name {self.name!r} is not representable in a prompt")

    def __str__(self) -> str:
        return self.name


class Actuation(str, enum.Enum):
    JOINT_VELOCITY = "joint_velocity"
    JOINT_POSITION = "joint_position"
    END_EFFECTOR_POSE = "end_effector_pose"


class ControlFrame(str, enum.Enum):
    ABSOLUTE = "absolute"
    DELTA = "delta"


_ACTUATION_PROSE = {
    Actuation.JOINT_VELOCITY: "joint velocity",
    Actuation.JOINT_POSITION: "joint position",
    Actuation.END_EFFECTOR_POSE: "end-effector pose",
}


@dataclass(frozen=True)
class ControlMode:
    actuation: Actuation
    frame: ControlFrame

    def __post_init__(self):
        object.__setattr__(self, "actuation", Actuation(self.actuation))
        object.__setattr__(self, "frame", ControlFrame(self.frame))
        if self.actuation is Actuation.JOINT_VELOCITY and self.frame is ControlFrame.ABSOLUTE:
            raise ValueError("absolute joint velocity is not a valid control mode")

    def describe(self) -> str:
        """English form used in prompts, e.g. ``"delta joint position"``."""
        return f"{self.frame.value} {_ACTUATION_PROSE[self.actuation]}"

    @classmethod
    def from_description(cls, text: str) -> "ControlMode":
        for mode in all_control_modes():
            if mode.describe() == text:
                return mode
        raise ValueError(f"unknown control mode description {text!r}")

    def __str__(self) -> str:
        return self.describe()


def all_control_modes() -> list[ControlMode]:
    modes = []
    for act in Actuation:
        for frame in ControlFrame:
            if act is Actuation.JOINT_VELOCITY and frame is ControlFrame.ABSOLUTE:
                continue
            modes.append(ControlMode(act, frame))
    return modes


@dataclass(frozen=True)
class ProprioState:
    joints: tuple[float, ...]
    gripper: float

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(float(v) for v in self.joints))
        object.__setattr__(self, "gripper", float(self.gripper))


@dataclass(frozen=True)
class Action:
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @property
    def gripper(self) -> float:
        return self.values[-1]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: tuple[tuple[float, ...], ...]
    width: int
    height: int

    def __post_init__(self):
        ext = tuple(tuple(float(v) for v in row) for row in self.extrinsic)
        if len(ext) != 4 or any(len(row) != 4 for row in ext):
            raise ValueError("extrinsic must be a 4x4 matrix")
        object.__setattr__(self, "extrinsic", ext)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.extrinsic, dtype=float)

    def violations(self) -> list[str]:
        out = []
        if not (self.fx > 0 and self.fy > 0):
            out.append("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            out.append("image size must be positive")
        if not (0 <= self.cx < self.width):
            out.append("cx outside image")
        if not (0 <= self.cy < self.height):
            out.append("cy outside image")
        m = self.matrix
        if not np.all(np.isfinite(m)):
            out.append("extrinsic has non-finite entries")
            return out
        if not np.array_equal(m[3], np.array([0.0, 0.0, 0.0, 1.0])):
            out.append("extrinsic bottom row must be (0, 0, 0, 1)")
        rot = m[:3, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > 1e-9:
            out.append("extrinsic rotation block is not orthonormal")
        return out


@dataclass(frozen=True)
class Frame:
    index: int
    image_ref: str
    state: ProprioState
    action: Optional[Action] = None
    ee_pos_3d: Optional[tuple[float, float, float]] = None
    ee_bbox: Optional[BBox] = None

    def __post_init__(self):
        if self.ee_pos_3d is not None:
            object.__setattr__(self, "ee_pos_3d", tuple(float(v) for v in self.ee_pos_3d))
        if self.ee_bbox is not None:
            object.__setattr__(self, "ee_bbox", tuple(float(v) for v in self.ee_bbox))


@dataclass(frozen=True)
class Episode:
    id: str
    subset: str
    robot: RobotType
    mode: ControlMode
    instruction: str
    frames: tuple[Frame, ...]
    camera: Optional[CameraModel] = None

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))

    @property
    def length(self) -> int:
        return len(self.frames)

    def frame(self, t: int) -> Frame:
        """Frame at 1-based timestep ``t``."""
        if not 1 <= t <= len(self.frames):
            raise IndexError(f"timestep {t} outside 1..{len(self.frames)}")
        return self.frames[t - 1]

    @property
    def num_actions(self) -> int:
        """Number of leading frames that carry an action."""
        count = 0
        for fr in self.frames:
            if fr.action is None:
                break
            count += 1
        return count


@dataclass(frozen=True)
class VisualTrace:
    points: tuple[Point2D, ...]
    start_t: int

    def __post_init__(self):
        object.__setattr__(
            self, "points", tuple((float(x), float(y)) for x, y in self.points)
        )

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Violation:
    frame: Optional[int]
    field: str
    message: str

    def __str__(self) -> str:
        where = f"frame {self.frame}" if self.frame is not None else "episode"
        return f"{where}: {self.field}: {self.message}"


def _finite(values: Sequence[float]) -> bool:
    return all(math.isfinite(v) for v in values)


def validate_episode(e: Episode, registry: Optional[Iterable[str]] = None) -> list[Violation]:
    """Check every episode invariant; returns an empty list for a valid episode."""
    out: list[Violation] = []
    known = set(registry) if registry is not None else _ROBOT_REGISTRY
    if e.robot.name not in known:
        out.append(Violation(None, "robot", f"unknown robot type {e.robot.name!r}"))
    if not e.instruction.strip():
        out.append(Violation(None, "instruction", "empty instruction"))
    elif "\n" in e.instruction:
        out.append(Violation(None, "instruction", "instruction must be a single line"))
    if not e.frames:
        out.append(Violation(None, "frames", "episode has no frames"))
        return out

    width = height = None
    if e.camera is not None:
        for msg in e.camera.violations():
            out.append(Violation(None, "camera", msg))
        width, height = e.camera.width, e.camera.height

    indices = [fr.index for fr in e.frames]
    if indices != list(range(1, len(e.frames) + 1)):
        out.append(Violation(None, "index", f"non-contiguous indices {indices}"))

    d_j = len(e.frames[0].state.joints)
    d_a = None
    trace_eligible = any(fr.ee_pos_3d is not None or fr.ee_bbox is not None for fr in e.frames)
    last = len(e.frames)
    for pos, fr in enumerate(e.frames, start=1):
        t = fr.index
        st = fr.state
        if len(st.joints) != d_j:
            out.append(Violation(t, "state.joints", f"expected {d_j} joints, got {len(st.joints)}"))
        if not _finite(st.joints):
            out.append(Violation(t, "state.joints", "non-finite joint value"))
        if not (0.0 <= st.gripper <= 1.0):
            out.append(Violation(t, "state.gripper", f"gripper {st.gripper} outside [0, 1]"))

        if fr.action is None:
            if pos != last:
                out.append(Violation(t, "action", "only the final frame may lack an action"))
        else:
            vals = fr.action.values
            if not vals:
                out.append(Violation(t, "action", "empty action"))
            else:
                if d_a is None:
                    d_a = len(vals)
                elif len(vals) != d_a:
                    out.append(Violation(t, "action", f"expected arity {d_a}, got {len(vals)}"))
                if not _finite(vals):
                    out.append(Violation(t, "action", "non-finite action value"))
                elif not (0.0 <= vals[-1] <= 1.0):
                    out.append(Violation(t, "action", f"gripper command {vals[-1]} outside [0, 1]"))

        if trace_eligible and fr.ee_pos_3d is None and fr.ee_bbox is None:
            out.append(Violation(t, "ee_pos_3d/ee_bbox", "no keypoint source on trace-eligible episode"))
        if fr.ee_pos_3d is not None and (len(fr.ee_pos_3d) != 3 or not _finite(fr.ee_pos_3d)):
            out.append(Violation(t, "ee_pos_3d", "must be a finite 3-vector"))
        if fr.ee_bbox is not None:
            out.extend(_bbox_violations(t, fr.ee_bbox, width, height))
    return out


def _bbox_violations(t: int, box: BBox, width, height) -> list[Violation]:
    if len(box) != 4 or not _finite(box):
        return [Violation(t, "ee_bbox", "must be four finite numbers")]
    x0, y0, x1, y1 = box
    out = []
    if not (x0 < x1 and y0 < y1):
        out.append(Violation(t, "ee_bbox", f"degenerate box {box}"))
    if x0 < 0 or y0 < 0:
        out.append(Violation(t, "ee_bbox", "box outside image bounds"))
    elif width is not None and (x1 > width or y1 > height):
        out.append(Violation(t, "ee_bbox", "box outside image bounds"))
    return out


# -- JSON episode format ----------------------------------------------------

def episode_to_dict(e: Episode) -> dict[str, Any]:
    frames = []
    for fr in e.frames:
        frames.append({
            "index": fr.index,
            "image_ref": fr.image_ref,
            "state": {"joints": list(fr.state.joints), "gripper": fr.state.gripper},
            "action": None if fr.action is None else {"values": list(fr.action.values)},
            "ee_pos_3d": None if fr.ee_pos_3d is None else list(fr.ee_pos_3d),
            "ee_bbox": None if fr.ee_bbox is None else list(fr.ee_bbox),
        })
    cam = None
    if e.camera is not None:
        c = e.camera
        cam = {
            "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
            "extrinsic": [list(row) for row in c.extrinsic],
            "width": c.width, "height": c.height,
        }
    return {
        "id": e.id,
        "subset": e.subset,
        "robot": e.robot.name,
        "mode": {"actuation": e.mode.actuation.value, "frame": e.mode.frame.value},
        "instruction": e.instruction,
        "frames": frames,
        "camera": cam,
    }


def episode_from_dict(doc: dict[str, Any]) -> Episode:
    try:
        frames = []
        for fd in doc["frames"]:
            act = fd.get("action")
            frames.append(Frame(
                index=int(fd["index"]),
                image_ref=str(fd["image_ref"]),
                state=ProprioState(fd["state"]["joints"], fd["state"]["gripper"]),
                action=None if act is None else Action(act["values"]),
                ee_pos_3d=fd.get("ee_pos_3d"),
                ee_bbox=fd.get("ee_bbox"),
            ))
        cam = doc.get("camera")
        camera = None if cam is None else CameraModel(
            cam["fx"], cam["fy"], cam["cx"], cam["cy"], cam["extrinsic"], cam["width"], cam["height"]
        )
        return Episode(
            id=str(doc["id"]),
            subset=str(doc["subset"]),
            robot=RobotType(doc["robot"]),
            mode=ControlMode(doc["mode"]["actuation"], doc["mode"]["frame"]),
            instruction=str(doc["instruction"]),
            frames=frames,
            camera=camera,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise EpisodeFormatError(f"malformed episode document: {exc!r}") from exc


class EpisodeFormatError(ValueError):
    pass


def dumps_episode(e: Episode) -> str:
    """Canonical serialization: compact JSON, fixed key order, trailing newline."""
    return json.dumps(episode_to_dict(e), ensure_ascii=False, separators=(",", ":"), allow_nan=False) + "\n"


def loads_episode(text: str) -> Episode:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise EpisodeFormatError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise EpisodeFormatError("episode document must be a JSON object")
    return episode_from_dict(doc)


def save_episode(e: Episode, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_episode(e), encoding="utf-8")
    return path


def load_episode(path: Path | str) -> Episode:
    return loads_episode(Path(path).read_text(encoding="utf-8"))


MANIFEST_NAME = "manifest.json"


@dataclass
class Manifest:
    subsets: list[str] = field(default_factory=list)
    schema_version: int = 1

    def dump(self, root: Path | str) -> Path:
        path = Path(root) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"schema_version": self.schema_version, "subsets": sorted(set(self.subsets))}
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, root: Path | str) -> "Manifest":
        path = Path(root) / MANIFEST_NAME
        if not path.exists():
            return cls()
        doc = json.loads(path.read_text(encoding="utf-8"))
        return cls(subsets=list(doc.get("subsets", [])), schema_version=int(doc.get("schema_version", 1)))


def iter_episode_paths(root: Path | str) -> list[Path]:
    """All episode JSON files under ``root`` in sorted path order."""
    root = Path(root)
    return sorted(p for p in root.rglob("*.json") if p.name != MANIFEST_NAME)
