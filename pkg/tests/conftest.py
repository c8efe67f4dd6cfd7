from __future__ import annotations

import math

import numpy as np
import pytest

from vatrace.domain import (
    Action,
    CameraModel,
    ControlMode,
    Episode,
    Frame,
    ProprioState,
    RobotType,
    all_control_modes,
)

IDENTITY = ((1, 0, 0, 0), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1))


def simple_camera(fx=100.0, cx=64.0, size=128, extrinsic=IDENTITY) -> CameraModel:
    return CameraModel(fx, fx, cx, cx, extrinsic, size, size)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def make_episode(
    rng: np.random.Generator,
    length: int,
    *,
    ep_id: str = "ep",
    subset: str = "synthetic",
    d_j: int = 3,
    robot: str = "Franka",
    mode: ControlMode | None = None,
    actioned_final: bool = True,
    camera: CameraModel | None = None,
    with_bbox: bool = True,
) -> Episode:
    """Random valid episode with both keypoint sources on every frame."""
    camera = camera or simple_camera()
    mode = mode or ControlMode("joint_position", "delta")
    frames = []
    for t in range(1, length + 1):
        joints = tuple(rng.uniform(-math.pi, math.pi, size=d_j))
        state = ProprioState(joints, float(rng.uniform(0, 1)))
        has_action = actioned_final or t < length
        action = None
        if has_action:
            action = Action(tuple(rng.uniform(-0.1, 0.1, size=d_j)) + (float(rng.uniform(0, 1)),))
        # point in front of an identity camera, inside the image
        z = float(rng.uniform(0.5, 2.0))
        u, v = rng.uniform(8, camera.width - 9, size=2)
        p3 = ((u - camera.cx) * z / camera.fx, (v - camera.cy) * z / camera.fy, z)
        w = float(rng.uniform(1, 6))
        bbox = (u - w, v - w, u + w, v + w) if with_bbox else None
        frames.append(Frame(t, f"img/{ep_id}/{t:04d}.pgm", state, action, p3, bbox))
    return Episode(ep_id, subset, RobotType(robot), mode, "open the drawer", tuple(frames), camera)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def episode(rng):
    return make_episode(rng, 5)


@pytest.fixture
def all_modes():
    return all_control_modes()


# -- acceptance summary ----------------------------------------------------------

_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in sorted(_ACCEPTANCE.items()):
        terminalreporter.write_line(f"{status}  {name}")
