import itertools
import math

import numpy as np
import pytest

from liso.core import Box
from liso.synthworld import ActorSpec, Segment, Trajectory, WorldSpec, random_world, simulate
from liso.tracker import (FORWARD, INITIAL, REGENERATION, REVERSE, Detection, Track, TrackEntry,
                          TrackerParams, build_detections, join_forward_reverse, match_greedy, postfilter,
                          propagate, records_to_tracks, run_tracker, track_sequence, tracks_to_records)

P = TrackerParams()
OFFS = np.array([[1, 0.5, 0], [-1, 0.5, 0], [1, -0.5, 0], [-1, -0.5, 0], [0, 0, 0.5]], float)


def det(t, j, center, vel, conf=1.0, heading=0.0):
    c = np.asarray(center, float)
    return Detection(Box(*c, 4, 2, 1.5, heading, conf), (t, j), c + OFFS, np.tile(vel, (5, 1)))


def straight(frames, start=(0, 0, 0), vel=(1.0, 0, 0), skip=()):
    """Detections of one actor moving at ``vel`` per frame; ``skip`` frames have none."""
    out = {}
    for t in frames:
        c = np.asarray(start) + t * np.asarray(vel)
        out[t] = [] if t in skip else [det(t, 0, c, vel)]
    return out


def test_propagate_examples():
    b = Box(0, 0, 0, 4, 2, 1.5)
    assert propagate(b, OFFS, np.zeros((5, 3))) == b
    moved = propagate(b, OFFS, np.tile([2.0, 0, 0], (5, 1)))
    assert moved.center == pytest.approx((2, 0, 0)) and moved.size == pytest.approx(b.size)
    # no interior points: fall back to zero motion unless a fallback is given
    assert propagate(b, np.zeros((0, 3)), np.zeros((0, 3))) == b


def test_propagate_turning_actor_close_to_gt():
    actor = ActorSpec((4.5, 1.9, 1.6), Trajectory((5, -5, 0.3), [Segment(20, 8.0, 0.4)]))
    ego = Trajectory((0, 0, 0), [Segment(20, 4.0, 0.1)])
    w = simulate(WorldSpec(4, [actor], ego, frame_count=10, background_density=0, ground_density=0))
    boxes = {r.frame_index: [r.box] for r in w.gt_boxes}
    dets = build_detections(w.frames, boxes, P)
    dt = w.spec.frame_interval_s
    for t in range(9):
        d = dets[t][0]
        pred = propagate(d.box, d.member_points, d.member_disp)
        x, y, _ = actor.trajectory.pose((t + 1) * dt, dt)
        assert math.hypot(pred.x - x, pred.y - y) < 0.3
        assert abs(math.remainder(pred.heading - actor.trajectory.pose((t + 1) * dt, dt)[2], 2 * math.pi)) < 0.02


def test_match_greedy_examples():
    assert match_greedy([[0, 0, 0]], [[1, 0, 0]], 1.5)[0] == [(0, 0)]
    pairs, up, ud = match_greedy([[0, 0, 0]], [[2, 0, 0]], 1.5)
    assert pairs == [] and up == [0] and ud == [0]
    assert match_greedy(np.zeros((0, 3)), [[0, 0, 0]], 1.5) == ([], [], [0])


def greedy_oracle(Pc, Dc, gate):
    # repeatedly take the globally closest remaining admissible pair
    P_left, D_left, pairs = set(range(len(Pc))), set(range(len(Dc))), []
    while True:
        best = None
        for i, j in itertools.product(sorted(P_left), sorted(D_left)):
            d = float(np.linalg.norm(np.subtract(Pc[i], Dc[j])))
            if d <= gate and (best is None or (d, i, j) < best):
                best = (d, i, j)
        if best is None:
            return sorted(pairs)
        pairs.append((best[1], best[2]))
        P_left.discard(best[1])
        D_left.discard(best[2])


def test_match_greedy_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n, m = rng.integers(0, 7, 2)
        Pc, Dc = rng.uniform(0, 3, (n, 3)), rng.uniform(0, 3, (m, 3))
        pairs, up, ud = match_greedy(Pc, Dc, 1.5)
        assert sorted(pairs) == greedy_oracle(Pc, Dc, 1.5)
        assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})
        assert sorted(up + [i for i, _ in pairs]) == list(range(n))


def test_match_greedy_crossing():
    # greedy takes the closest pair first even though the other assignment has lower total cost
    pairs, _, _ = match_greedy([[0, 0, 0], [1.0, 0, 0]], [[0.6, 0, 0], [-0.8, 0, 0]], 1.5)
    assert sorted(pairs) == [(0, 1), (1, 0)]


def test_single_actor_one_tracklet():
    tr = track_sequence(straight(range(10)), P)
    assert len(tr) == 1 and tr[0].frames == list(range(10)) and all(e.observed for e in tr[0].entries)


def test_dropout_one_frame_is_coasted():
    tr = track_sequence(straight(range(10), skip={5}), P)
    assert len(tr) == 1 and tr[0].frames == list(range(10))
    assert [e.observed for e in tr[0].entries] == [True] * 5 + [False] + [True] * 4
    assert tr[0].entries[5].box.center == pytest.approx((5, 0, 0))


def test_dropout_two_frames_splits():
    tr = track_sequence(straight(range(10), skip={5, 6}), P)
    assert [t.frames for t in tr] == [list(range(5)), list(range(7, 10))]


def test_reverse_direction_entries_in_time_order():
    tr = track_sequence(straight(range(10), skip={5}), P, REVERSE)
    assert len(tr) == 1 and tr[0].frames == list(range(10))
    assert not tr[0].entries[5].observed


def test_spawn_suppressed_near_prediction():
    dets = straight(range(3))
    dets[1].append(det(1, 1, (1.0, 1.0, 0), (1, 0, 0)))  # 1 m from the prediction, lost the match
    tr = track_sequence(dets, P)
    assert len(tr) == 1


def tracklet(frames, actor, observed=None):
    observed = observed or {}
    return Track(0, [TrackEntry(t, Box(t, actor * 20.0, 0, 4, 2, 1.5), observed.get(t, True),
                                (t, actor) if observed.get(t, True) else None) for t in frames])


def test_join_overlap():
    out = join_forward_reverse([tracklet(range(0, 7), 0)], [tracklet(range(4, 11), 0)])
    assert len(out) == 1 and out[0].frames == list(range(11))


def test_join_disjoint_and_idempotent():
    fw = [tracklet(range(0, 5), 0), tracklet(range(0, 5), 1)]
    out = join_forward_reverse(fw, [])
    assert [t.frames for t in out] == [list(range(5))] * 2
    same = join_forward_reverse(fw, fw)
    assert [[(e.frame_index, e.source) for e in t.entries] for t in same] == \
        [[(e.frame_index, e.source) for e in t.entries] for t in fw]


def test_join_prefers_observed_over_coasted():
    fw = [tracklet(range(0, 6), 0, observed={5: False})]
    rv = [tracklet(range(3, 9), 0)]
    out = join_forward_reverse(fw, rv)
    assert len(out) == 1 and all(e.observed for e in out[0].entries)


def with_conf(confs):
    return Track(0, [TrackEntry(t, Box(0, 0, 0, 1, 1, 1, 0, c)) for t, c in enumerate(confs)])


def test_postfilter_examples():
    assert postfilter([with_conf([1] * 3)], P) == []
    assert postfilter([with_conf([0.25] * 10)], P, REGENERATION) == []
    kept = postfilter([with_conf([0.2] * 4 + [0.9] * 6)], P, REGENERATION)
    assert len(kept) == 1 and kept[0].median_confidence() == pytest.approx(0.9)
    with pytest.raises(ValueError):
        postfilter([], P, "bogus")


def test_regeneration_coasted_conf_is_median():
    tr = with_conf([0.5, 0.6, 0.7, 0.8, 0.9])
    tr.entries[2].observed = False
    out = postfilter([tr], P, REGENERATION)[0]
    assert out.entries[2].box.confidence == pytest.approx(np.median([0.5, 0.6, 0.8, 0.9]))
    # initial mode keeps confidences as they are
    assert postfilter([tr], P, INITIAL)[0].entries[2].box.confidence == 0.7


def test_records_roundtrip():
    trs = track_sequence(straight(range(6), skip={3}), P)
    back = records_to_tracks(tracks_to_records(trs))
    assert [(t.track_id, [(e.frame_index, e.box, e.observed) for e in t.entries]) for t in back] == \
        [(t.track_id, [(e.frame_index, e.box, e.observed) for e in t.entries]) for t in trs]


def test_time_reversal_symmetry():
    rng = np.random.default_rng(1)
    T = 12
    dets = {t: [] for t in range(T)}
    for a in range(3):
        start, vel = rng.uniform(-20, 20, 3) * (1, 1, 0) + (0, 0, 1), rng.uniform(-1, 1, 3) * (1, 1, 0)
        for t in range(T):
            if rng.random() < 0.85:
                dets[t].append(det(t, len(dets[t]), start + t * vel, vel))
    rev = {T - 1 - t: [Detection(d.box, (T - 1 - t, d.source[1]), d.member_points, -d.member_disp) for d in ds]
           for t, ds in dets.items()}

    def groups(tracks, flip):
        return sorted(sorted(((T - 1 - e.source[0]) if flip else e.source[0], e.source[1])
                             for e in tr.entries if e.observed) for tr in tracks)

    assert groups(track_sequence(rev, P, FORWARD), True) == groups(track_sequence(dets, P, REVERSE), False)


def test_no_identity_switches_on_synthworld():
    for seed in range(4):
        w = simulate(random_world(seed, n_moving=3, n_static=2))
        gt = w.boxes_by_frame()
        boxes = {t: [r.box for r in rs] for t, rs in gt.items()}
        ids = {(t, j): r.track_id for t, rs in gt.items() for j, r in enumerate(rs)}
        tracks = run_tracker(w.frames, boxes, P)
        seen = {}
        for tr in tracks:
            gids = {ids[e.source] for e in tr.entries if e.observed and e.source is not None}
            assert len(gids) == 1, "track mixes actors"
            gid = gids.pop()
            assert gid not in seen, "actor split over tracks"
            seen[gid] = tr
        # output boxes come from the inputs or are coasted predictions; sizes never invented
        for tr in tracks:
            for e in tr.entries:
                assert tuple(e.box.size) in {tuple(b.size) for bs in boxes.values() for b in bs}


def test_tracker_params_validation():
    with pytest.raises(ValueError):
        TrackerParams(match_max_dist=0).validate()
    with pytest.raises(ValueError):
        TrackerParams(min_median_conf=2).validate()
