import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liso.core import (Box, PointFrame, RigidTransform, box_corners_bev, check_sequence, normalize_heading,
                       normalize_headings, transform_point, world_poses)

finite = st.floats(-1e3, 1e3, allow_nan=False)
angles = st.floats(-20.0, 20.0, allow_nan=False)


def random_transform(rng):
    # random rotation via QR, forced to det +1
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    m = np.eye(4)
    m[:3, :3] = q
    m[:3, 3] = rng.uniform(-50, 50, 3)
    return RigidTransform(m)


def test_transform_point_examples():
    assert np.allclose(transform_point(RigidTransform.identity(), (1, 2, 3)), (1, 2, 3))
    T = RigidTransform.from_yaw_translation(0.0, (1, 0, 0))
    assert np.allclose(transform_point(T, (0, 0, 0)), (1, 0, 0))
    R = RigidTransform.from_yaw_translation(math.pi / 2)
    assert np.allclose(transform_point(R, (1, 0, 0)), (0, 1, 0), atol=1e-9)


def test_transform_validation():
    bad = np.eye(4)
    bad[3, 0] = 1e-3
    with pytest.raises(ValueError):
        RigidTransform(bad)
    skew = np.eye(4)
    skew[0, 1] = 0.1
    with pytest.raises(ValueError):
        RigidTransform(skew)
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3))
    nan = np.eye(4)
    nan[0, 3] = np.nan
    with pytest.raises(ValueError):
        RigidTransform(nan)


def test_compose_inverse_identity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        T = random_transform(rng)
        assert np.abs((T @ T.inverse()).matrix - np.eye(4)).max() < 1e-6
        assert np.array_equal((T @ T.inverse()).matrix[3], [0, 0, 0, 1])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), finite, finite, finite)
def test_inverse_roundtrip_property(seed, x, y, z):
    T = random_transform(np.random.default_rng(seed))
    p = np.array([x, y, z])
    assert np.allclose(transform_point(T.inverse(), transform_point(T, p)), p, atol=1e-6)


def test_normalize_heading_examples():
    assert normalize_heading(0.0) == 0.0
    assert normalize_heading(1.5 * math.pi) == pytest.approx(-0.5 * math.pi, abs=1e-12)
    assert normalize_heading(-math.pi) == -math.pi
    assert normalize_heading(math.pi) == -math.pi
    for bad in (math.inf, math.nan):
        with pytest.raises(ValueError):
            normalize_heading(bad)


@settings(max_examples=300)
@given(angles)
def test_normalize_heading_properties(theta):
    h = normalize_heading(theta)
    assert -math.pi <= h < math.pi
    assert normalize_heading(h) == h
    k = (theta - h) / (2 * math.pi)
    assert abs(k - round(k)) < 1e-9
    assert normalize_headings(np.array([theta]))[0] == pytest.approx(h, abs=1e-12)


def test_box_validation():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 0, 1, 1)
    with pytest.raises(ValueError):
        Box(0, 0, 0, 1, 1, 1, confidence=1.5)
    with pytest.raises(ValueError):
        Box(math.nan, 0, 0, 1, 1, 1)
    assert Box(0, 0, 0, 1, 1, 1, heading=3 * math.pi).heading == pytest.approx(-math.pi)


def test_corners_examples():
    c = box_corners_bev(Box(0, 0, 0, 2, 1, 1))
    assert sorted(map(tuple, np.round(c, 12))) == sorted([(1, -0.5), (1, 0.5), (-1, 0.5), (-1, -0.5)])
    c = box_corners_bev(Box(0, 0, 0, 2, 1, 1, math.pi / 2))
    assert sorted(map(tuple, np.round(c, 12) + 0.0)) == sorted([(0.5, 1), (-0.5, 1), (-0.5, -1), (0.5, -1)])
    # pi/4: hand-rotate the axis-aligned corners
    base = box_corners_bev(Box(0, 0, 0, 2, 1, 1))
    a = math.pi / 4
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    assert np.allclose(box_corners_bev(Box(0, 0, 0, 2, 1, 1, a)), base @ R.T)


def shoelace(P):
    x, y = P[:, 0], P[:, 1]
    return 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@settings(max_examples=200)
@given(finite, finite, st.floats(0.01, 50), st.floats(0.01, 50), angles)
def test_corner_area_ccw(x, y, l, w, th):
    P = box_corners_bev(Box(x, y, 0, l, w, 1, th))
    area = shoelace(P)
    assert area > 0  # counter-clockwise
    assert area == pytest.approx(l * w, abs=1e-9 * max(1.0, abs(x) + abs(y)) * (l + w))


def test_box_transformed_and_contains():
    b = Box(1, 0, 0.5, 2, 1, 1, 0.0)
    T = RigidTransform.from_yaw_translation(math.pi / 2, (0, 0, 1))
    tb = b.transformed(T)
    assert np.allclose(tb.center, (0, 1, 1.5))
    assert tb.heading == pytest.approx(math.pi / 2)
    pts = np.array([[1.9, 0.4, 0.9], [2.1, 0, 0.5]])
    assert list(b.contains(pts)) == [True, False]
    assert list(b.contains(pts, margin=0.2)) == [True, True]


def test_box_array_roundtrip():
    b = Box(1, 2, 3, 4, 5, 6, 0.5, 0.7)
    assert Box.from_array(b.as_array()) == b


def test_point_frame_lengths():
    with pytest.raises(ValueError):
        PointFrame(0, np.zeros((3, 3)), flow=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PointFrame(0, np.zeros((3, 3)), ground_mask=np.zeros(4, bool))
    f = PointFrame(0, np.zeros((3, 3)), np.zeros((3, 3)), np.array([1, 0, 0], bool),
                   RigidTransform.identity())
    v = f.appearance_view()
    assert v.flow is None and v.pose_to_next is None
    assert list(f.non_ground()) == [False, True, True]


def test_sequence_checks_and_world_poses():
    step = RigidTransform.from_yaw_translation(0.1, (1, 0, 0))
    frames = [PointFrame(t, np.zeros((1, 3)), pose_to_next=step) for t in range(4)]
    check_sequence(frames)
    poses = world_poses(frames)
    assert np.allclose(poses[3].matrix, (step @ step @ step).matrix)
    with pytest.raises(ValueError):
        check_sequence([frames[1], frames[0]])
