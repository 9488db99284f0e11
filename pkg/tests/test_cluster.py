import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liso.cluster import (ClusterParams, cluster_6d, cluster_frame, discard_degenerate, estimate_ground_mask,
                          filter_static, fit_box, ground_mask_for, min_area_heading, residual_flow)
from liso.core import Box, PointFrame, RigidTransform
from liso.synthworld import ActorSpec, Segment, Trajectory, WorldSpec, random_world, simulate
from oracles import check_dbscan

P = ClusterParams()


def shell(l, w, h, n, rng, heading=0.0, center=(0, 0, 0)):
    pts = rng.uniform(-0.5, 0.5, (n, 3)) * (l, w, h)
    face = rng.integers(0, 3, n)
    for k, ext in enumerate((l, w, h)):
        m = face == k
        pts[m, k] = np.sign(pts[m, k]) * ext / 2
    c, s = math.cos(heading), math.sin(heading)
    return pts @ np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]]) + center


def test_residual_flow_static_ego_is_identity():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(10, 3))
    fr = PointFrame(0, rng.normal(size=(10, 3)), f, pose_to_next=RigidTransform.identity())
    np.testing.assert_array_equal(residual_flow(fr), f)


def test_residual_flow_cancels_ego_translation():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(20, 3)) * 10
    T = np.eye(4)
    T[0, 3] = 1.0
    f_sta = (np.c_[p, np.ones(20)] @ (np.linalg.inv(T) - np.eye(4)).T)[:, :3]
    fr = PointFrame(0, p, f_sta, pose_to_next=RigidTransform(T))
    assert np.abs(residual_flow(fr)).max() < 1e-9


def test_residual_flow_needs_flow_and_pose():
    with pytest.raises(ValueError):
        residual_flow(PointFrame(0, np.zeros((1, 3))))


def test_residual_flow_on_synth_actor():
    actor = ActorSpec((4, 2, 1.5), Trajectory((5, 5, 0.4), [Segment(10, 20.0, 0.0)]))
    ego = Trajectory((0, 0, 0), [Segment(10, 5.0, 0.1)])
    w = simulate(WorldSpec(1, [actor], ego, frame_count=4, background_density=0, ground_density=0))
    for fr in w.frames:
        assert np.allclose(np.linalg.norm(residual_flow(fr), axis=1), 2.0, atol=1e-9)


def test_filter_static_examples():
    assert len(filter_static(np.zeros((5, 3)), np.zeros((5, 3)), P, 0.1)) == 0
    f = np.zeros((5, 3))
    f[3] = (0.15, 0, 0)  # 1.5 m/s at 0.1 s
    assert list(filter_static(np.zeros((5, 3)), f, P, 0.1)) == [3]
    g = np.zeros(5, bool)
    g[3] = True
    assert len(filter_static(np.zeros((5, 3)), f, P, 0.1, g)) == 0


def test_filter_static_uniform_speeds_fraction():
    rng = np.random.default_rng(2)
    n = 20000
    v = rng.uniform(0, 2, n)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    frac = len(filter_static(np.zeros((n, 3)), d * v[:, None] * 0.1, P, 0.1)) / n
    assert abs(frac - 0.5) < 4 * math.sqrt(0.25 / n)


def test_filter_static_idempotent():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(200, 3)) * 0.1
    idx = filter_static(None, f, P, 0.1)
    again = filter_static(None, f[idx], P, 0.1)
    assert np.array_equal(idx[again], idx)


def test_cluster_6d_examples():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 1, (20, 3))
    pts = np.r_[a, a + (10, 0, 0)]
    assert len(cluster_6d(pts, np.ones_like(pts), P)) == 2
    # co-located groups with opposite 3 m/frame flows
    pts = np.r_[a, a]
    flow = np.r_[np.tile([3, 0, 0], (20, 1)), np.tile([-3, 0, 0], (20, 1))]
    cl = cluster_6d(pts, flow, P)
    assert sorted(map(list, cl)) == [list(range(20)), list(range(20, 40))]
    assert cluster_6d(rng.uniform(0, 100, (4, 3)), np.zeros((4, 3)), P) == []
    assert cluster_6d(np.zeros((0, 3)), np.zeros((0, 3)), P) == []


def test_cluster_6d_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(30):
        n = int(rng.integers(1, 100))
        pts = rng.uniform(0, 4, (n, 3))
        flow = rng.uniform(-1, 1, (n, 3))
        labels = np.full(n, -1)
        for k, c in enumerate(cluster_6d(pts, flow, P)):
            labels[c] = k
        check_dbscan(labels, np.c_[pts, flow], 1.0, 5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cluster_6d_order_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 80
    pts, flow = rng.uniform(0, 4, (n, 3)), rng.uniform(-1, 1, (n, 3))
    perm = rng.permutation(n)
    a = cluster_6d(pts, flow, P)
    b = cluster_6d(pts[perm], flow[perm], P)
    # core points are order independent; compare clusters restricted to cores
    from oracles import dbscan_bruteforce
    core, _, _ = dbscan_bruteforce(np.c_[pts, flow], 1.0, 5)
    ca = sorted(sorted(int(i) for i in c if core[i]) for c in a)
    cb = sorted(sorted(int(perm[i]) for i in c if core[perm[i]]) for c in b)
    assert ca == cb


def test_fit_box_axis_aligned():
    rng = np.random.default_rng(6)
    pts = shell(2, 1, 1, 400, rng)
    fit = fit_box(pts, np.tile([0.3, 0, 0], (400, 1)))
    b = fit.box
    assert fit.heading_from_flow
    assert (b.l, b.w, b.h, b.heading, b.confidence) == pytest.approx((2, 1, 1, 0, 1), abs=1e-9)


def test_fit_box_rotated_from_synth():
    a = math.radians(30)
    actor = ActorSpec((2, 1, 1), Trajectory((0, 8, a), [Segment(5, 10.0, 0.0)]))
    w = simulate(WorldSpec(2, [actor], frame_count=2, background_density=0, ground_density=0,
                           surface_density=60))
    fr = w.frames[0]
    b = fit_box(fr.points, residual_flow(fr)).box
    assert abs(b.heading - a) < math.radians(2)
    assert (b.l, b.w, b.h) == pytest.approx((2, 1, 1), abs=0.05)
    assert b.confidence == 1.0


def test_fit_box_zero_flow_fallback():
    rng = np.random.default_rng(7)
    pts = shell(3, 1, 1, 300, rng, heading=0.6)
    fit = fit_box(pts, np.zeros((300, 3)))
    assert not fit.heading_from_flow
    assert abs(fit.box.heading - 0.6) < 1e-6 and fit.box.l == pytest.approx(3, abs=1e-6)
    with pytest.raises(ValueError):
        fit_box(np.zeros((0, 3)), np.zeros((0, 3)))


def test_min_area_heading_canonical_range():
    rng = np.random.default_rng(8)
    for th in np.linspace(-3, 3, 13):
        h = min_area_heading(shell(4, 1.5, 1, 200, rng, heading=th)[:, :2])
        assert -math.pi / 2 <= h < math.pi / 2
        d = (h - th) % math.pi
        assert min(d, math.pi - d) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fitted_box_covers_cluster(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3)) * rng.uniform(0.2, 3, 3)
    flow = rng.normal(size=(30, 3))
    b = fit_box(pts, flow).box
    assert b.contains(pts, 1e-6).mean() >= 0.95


def test_discard_examples():
    boxes = [Box(0, 0, 0, 4.5, 1, 1), Box(0, 0, 0, 0.5, 0.5, 1), Box(0, 0, 0, 4, 2, 1.5),
             Box(0, 0, 0, 1, 4.5, 1), Box(0, 0, 0, 1, 1, 0.4)]
    assert discard_degenerate(boxes, P) == [boxes[2]]


def test_params_validation():
    with pytest.raises(ValueError):
        ClusterParams(dbscan_eps=-1).validate()
    with pytest.raises(ValueError):
        ClusterParams(dbscan_min_pts=0).validate()


def test_ground_fallback_finds_plane():
    rng = np.random.default_rng(9)
    ground = np.c_[rng.uniform(-20, 20, (500, 2)), rng.normal(0, 0.02, 500)]
    objs = rng.uniform([-20, -20, 0.5], [20, 20, 2], (200, 3))
    mask = estimate_ground_mask(np.r_[ground, objs])
    assert mask[:500].mean() > 0.99 and mask[500:].sum() == 0
    fr = PointFrame(0, np.r_[ground, objs])
    assert ground_mask_for(fr, P).sum() == mask.sum()


def test_k_moving_actors_give_k_clusters():
    for seed in range(5):
        spec = random_world(seed, n_moving=3, n_static=0)
        w = simulate(spec)
        for fr in w.frames[::7]:
            visible = {int(a) for a in np.unique(w.point_labels[fr.timestamp_index]) if a >= 0}
            assert len(cluster_frame(fr, P, spec.frame_interval_s)) == len(visible)
