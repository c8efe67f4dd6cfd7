import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_episode, random_rotation, simple_camera
from vatrace.domain import CameraModel
from vatrace.trace import (
    BehindCameraError,
    DegenerateBoxError,
    MissingKeypointError,
    OutOfBoundsError,
    TraceSource,
    bbox_center,
    build_trace,
    project_point,
    project_points,
)
from dataclasses import replace


@pytest.mark.parametrize("box, center", [
    ((10, 20, 30, 40), (20, 30)),
    ((0, 0, 128, 128), (64, 64)),
    ((5, 5, 6, 9), (5.5, 7)),
])
def test_bbox_center(box, center):
    assert bbox_center(box) == center


def test_degenerate_bbox_names_frame():
    with pytest.raises(DegenerateBoxError) as exc:
        bbox_center((3, 3, 3, 9), frame=7)
    assert exc.value.frame == 7


def test_optical_axis_hits_principal_point():
    assert project_point((0, 0, 1), simple_camera()) == (64, 64)


def test_hand_evaluated_projection():
    # 100 * 0.1 / 1 + 64 = 74 ; 100 * -0.2 / 1 + 64 = 44
    u, v = project_point((0.1, -0.2, 1.0), simple_camera())
    assert u == pytest.approx(74, abs=1e-12)
    assert v == pytest.approx(44, abs=1e-12)


def test_behind_camera():
    with pytest.raises(BehindCameraError):
        project_point((0, 0, -1), simple_camera(), frame=2)


def homogeneous_oracle(p, cam: CameraModel):
    k = np.array([[cam.fx, 0, cam.cx, 0], [0, cam.fy, cam.cy, 0], [0, 0, 1, 0]])
    x = k @ np.array(cam.extrinsic) @ np.array([p[0], p[1], p[2], 1.0])
    return x[0] / x[2], x[1] / x[2]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(0.01, 100))
def test_scale_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1, 1, 3)
    p[2] = abs(p[2]) + 0.1
    cam = simple_camera()
    a = project_point(p, cam)
    b = project_point(lam * p, cam)
    assert b == pytest.approx(a, abs=1e-9)


def test_vectorized_projection_matches_scalar(rng):
    cam = simple_camera()
    pts = np.column_stack([rng.uniform(-1, 1, (50, 2)), rng.uniform(0.5, 3, 50)])
    vec = project_points(pts, cam)
    for p, uv in zip(pts, vec):
        assert tuple(uv) == pytest.approx(project_point(p, cam), abs=1e-12)


def test_projection_with_rotated_extrinsic_matches_oracle(rng):
    rot = random_rotation(rng)
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = [0.1, -0.2, 3.0]
    cam = simple_camera(extrinsic=tuple(map(tuple, ext)))
    for _ in range(100):
        p = rng.uniform(-0.5, 0.5, 3)
        assert project_point(p, cam) == pytest.approx(homogeneous_oracle(p, cam), abs=1e-9)


@pytest.mark.parametrize("t, length", [(3, 3), (5, 1), (1, 5)])
def test_trace_lengths(episode, t, length):
    tr = build_trace(episode, t)
    assert len(tr) == length
    assert tr.start_t == t


def test_full_trace_starts_at_frame_one(episode):
    tr = build_trace(episode, 1)
    assert tr.points[0] == bbox_center(episode.frames[0].ee_bbox)


def test_suffix_property(episode):
    for t in range(1, episode.length):
        assert build_trace(episode, t + 1).points == build_trace(episode, t).points[1:]


def test_sources_agree(episode):
    a = build_trace(episode, 1, TraceSource("bbox_centers"))
    b = build_trace(episode, 1, TraceSource("projection"))
    assert np.allclose(a.points, b.points, atol=1e-6)


def test_missing_box_names_frame(episode):
    frames = list(episode.frames)
    frames[3] = replace(frames[3], ee_bbox=None)
    e = replace(episode, frames=tuple(frames))
    with pytest.raises(MissingKeypointError) as exc:
        build_trace(e, 2)
    assert exc.value.frame == 4
    # frames before the gap are not needed for later suffixes
    assert len(build_trace(e, 5)) == 1


def test_projection_requires_camera(episode):
    with pytest.raises(MissingKeypointError):
        build_trace(replace(episode, camera=None), 1, TraceSource("projection"))


def _with_far_point(episode):
    frames = list(episode.frames)
    frames[1] = replace(frames[1], ee_bbox=(150.0, -20.0, 160.0, -10.0))
    return replace(episode, frames=tuple(frames))


def test_oob_policies(episode):
    e = _with_far_point(episode)
    clamped = build_trace(e, 1, TraceSource(oob_policy="clamp"))
    assert clamped.points[1] == (127.0, 0.0)
    kept = build_trace(e, 1, TraceSource(oob_policy="keep"))
    assert kept.points[1] == (155.0, -15.0)
    with pytest.raises(OutOfBoundsError) as exc:
        build_trace(e, 1, TraceSource(oob_policy="reject"))
    assert [t for t, _ in exc.value.offending] == [2]
    assert len(build_trace(e, 3, TraceSource(oob_policy="reject"))) == 3


def test_bad_timestep(episode):
    with pytest.raises(ValueError):
        build_trace(episode, 0)
    with pytest.raises(ValueError):
        build_trace(episode, 6)


def test_trace_points_within_image_after_clamp(rng):
    e = make_episode(rng, 10)
    tr = build_trace(e, 1)
    for x, y in tr.points:
        assert 0 <= x <= 127 and 0 <= y <= 127
