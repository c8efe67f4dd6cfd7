"""End-effector visual traces from detector boxes or pinhole projection."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .domain import BBox, CameraModel, Episode, Frame, Point2D, VisualTrace


class TraceError(ValueError):
    """Raised when a trace point cannot be produced; ``frame`` names the timestep."""

    def __init__(self, message: str, frame: Optional[int] = None):
        self.frame = frame
        where = f"frame {frame}: " if frame is not None else ""
        super().__init__(where + message)


class DegenerateBoxError(TraceError):
    pass


class BehindCameraError(TraceError):
    pass


class MissingKeypointError(TraceError):
    pass


class OutOfBoundsError(TraceError):
    def __init__(self, offending: list[tuple[int, Point2D]]):
        self.offending = offending
        listed = ", ".join(f"t={t} ({x:.3f}, {y:.3f})" for t, (x, y) in offending)
        super().__init__(f"trace points outside image: {listed}", frame=offending[0][0])


class SourceKind(str, enum.Enum):
    BBOX_CENTERS = "bbox_centers"
    PROJECTION = "projection"


class OobPolicy(str, enum.Enum):
    CLAMP = "clamp"
    REJECT = "reject"
    KEEP = "keep"


@dataclass(frozen=True)
class TraceSource:
    kind: SourceKind = SourceKind.BBOX_CENTERS
    oob_policy: OobPolicy = OobPolicy.CLAMP

    def __post_init__(self):
        object.__setattr__(self, "kind", SourceKind(self.kind))
        object.__setattr__(self, "oob_policy", OobPolicy(self.oob_policy))


def bbox_center(b: BBox, frame: Optional[int] = None) -> Point2D:
    x0, y0, x1, y1 = b
    if not (x1 > x0 and y1 > y0):
        raise DegenerateBoxError(f"degenerate bounding box {tuple(b)}", frame)
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)


def project_point(p: Sequence[float], cam: CameraModel, frame: Optional[int] = None) -> Point2D:
    """Pinhole projection of a world point through ``cam``'s extrinsic."""
    e = cam.extrinsic
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    xc = e[0][0] * x + e[0][1] * y + e[0][2] * z + e[0][3]
    yc = e[1][0] * x + e[1][1] * y + e[1][2] * z + e[1][3]
    zc = e[2][0] * x + e[2][1] * y + e[2][2] * z + e[2][3]
    if not zc > 0:
        raise BehindCameraError(f"point {tuple(p)} has camera depth {zc:g} <= 0", frame)
    return (cam.fx * xc / zc + cam.cx, cam.fy * yc / zc + cam.cy)


def project_points(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Vectorized :func:`project_point` for an ``(M, 3)`` array; no depth check."""
    pts = np.asarray(points, dtype=float)
    m = cam.matrix
    cam_pts = pts @ m[:3, :3].T + m[:3, 3]
    u = cam.fx * cam_pts[:, 0] / cam_pts[:, 2] + cam.cx
    v = cam.fy * cam_pts[:, 1] / cam_pts[:, 2] + cam.cy
    return np.stack([u, v], axis=1)


def keypoint(fr: Frame, src: TraceSource, cam: Optional[CameraModel]) -> Point2D:
    if src.kind is SourceKind.BBOX_CENTERS:
        if fr.ee_bbox is None:
            raise MissingKeypointError("missing end-effector bounding box", fr.index)
        return bbox_center(fr.ee_bbox, fr.index)
    if cam is None:
        raise MissingKeypointError("projection source requires an episode camera", fr.index)
    if fr.ee_pos_3d is None:
        raise MissingKeypointError("missing 3-D end-effector position", fr.index)
    return project_point(fr.ee_pos_3d, cam, fr.index)


def build_trace(
    e: Episode,
    t: int,
    src: TraceSource = TraceSource(),
    image_size: Optional[tuple[int, int]] = None,
) -> VisualTrace:
    """Keypoints of frames ``t..N`` in order.

    Image bounds come from ``image_size`` (width, height) or the episode camera;
    with neither, no out-of-bounds handling is possible and points pass through.
    """
    n = e.length
    if not 1 <= t <= n:
        raise ValueError(f"timestep {t} outside 1..{n}")
    points = [keypoint(e.frames[i - 1], src, e.camera) for i in range(t, n + 1)]

    if image_size is None and e.camera is not None:
        image_size = (e.camera.width, e.camera.height)
    if image_size is not None and src.oob_policy is not OobPolicy.KEEP:
        xmax, ymax = image_size[0] - 1, image_size[1] - 1
        offending = [
            (t + k, pt) for k, pt in enumerate(points)
            if not (0 <= pt[0] <= xmax and 0 <= pt[1] <= ymax)
        ]
        if offending:
            if src.oob_policy is OobPolicy.REJECT:
                raise OutOfBoundsError(offending)
            points = [(min(max(x, 0.0), xmax), min(max(y, 0.0), ymax)) for x, y in points]
    return VisualTrace(tuple(points), start_t=t)
