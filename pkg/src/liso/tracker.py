"""Flow-based greedy tracker in a world-fixed frame.

Tracking runs forward and backward in time; tracklets sharing a source
detection are joined into tracks, which are then post-filtered by length and
median confidence. All boxes handled here are in the world frame (the ego
frame of frame 0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .cluster import residual_flow
from .core import Box, normalize_heading, world_poses
from .io import BoxRecord

FORWARD, REVERSE = "forward", "reverse"
INITIAL, REGENERATION = "initial", "regeneration"


@dataclass
class TrackerParams:
    match_max_dist: float = 1.5
    coast_steps: int = 1
    min_track_len: int = 4
    min_median_conf: float = 0.3
    lookup_margin: float = 0.1

    def validate(self) -> None:
        if not self.match_max_dist > 0:
            raise ValueError("tracker.match_max_dist must be positive")
        if self.coast_steps < 0 or self.min_track_len < 1:
            raise ValueError("tracker.coast_steps must be >= 0 and min_track_len >= 1")
        if not 0 <= self.min_median_conf <= 1:
            raise ValueError("tracker.min_median_conf must be in [0, 1]")
        if self.lookup_margin < 0:
            raise ValueError("tracker.lookup_margin must be non-negative")


@dataclass
class Detection:
    """A candidate box plus the world-frame positions and displacements of its points."""

    box: Box
    source: tuple
    member_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    member_disp: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


@dataclass
class TrackEntry:
    frame_index: int
    box: Box
    observed: bool = True
    source: Optional[tuple] = None


@dataclass
class Track:
    track_id: int
    entries: list

    def __len__(self):
        return len(self.entries)

    @property
    def frames(self) -> list[int]:
        return [e.frame_index for e in self.entries]

    def centers(self) -> np.ndarray:
        return np.array([[e.box.x, e.box.y, e.box.z] for e in self.entries]).reshape(-1, 3)

    def median_confidence(self) -> float:
        conf = [e.box.confidence for e in self.entries if e.observed]
        return float(np.median(conf)) if conf else 0.0


@dataclass
class Motion:
    dcenter: np.ndarray
    dheading: float

    @classmethod
    def zero(cls) -> Motion:
        return cls(np.zeros(3), 0.0)

    def inverse(self) -> Motion:
        return Motion(-self.dcenter, -self.dheading)

    def apply(self, box: Box) -> Box:
        c = box.center + self.dcenter
        return replace(box, x=c[0], y=c[1], z=c[2], heading=normalize_heading(box.heading + self.dheading))


def rigid_motion(member_points: np.ndarray, member_disp: np.ndarray) -> Optional[Motion]:
    """Rigid BEV motion of a box: mean displacement plus the Kabsch yaw of its points."""
    if len(member_points) == 0:
        return None
    disp = member_disp.mean(axis=0)
    dpsi = 0.0
    if len(member_points) >= 3:
        p = member_points[:, :2] - member_points[:, :2].mean(axis=0)
        q = member_points[:, :2] + member_disp[:, :2]
        q = q - q.mean(axis=0)
        s_cross = float(np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0]))
        s_dot = float(np.sum(p[:, 0] * q[:, 0] + p[:, 1] * q[:, 1]))
        if abs(s_cross) + abs(s_dot) > 1e-12:
            dpsi = math.atan2(s_cross, s_dot)
    return Motion(disp, dpsi)


def propagate(box: Box, member_points: np.ndarray, member_disp: np.ndarray,
              fallback: Optional[Motion] = None) -> Box:
    """Predict the box one step ahead from its members' residual motion.

    Without members the ``fallback`` motion (last box-to-box motion) is used.
    Size is never changed.
    """
    motion = rigid_motion(np.asarray(member_points).reshape(-1, 3), np.asarray(member_disp).reshape(-1, 3))
    if motion is None:
        motion = fallback or Motion.zero()
    return motion.apply(box)


def match_greedy(predicted, detected, max_dist: float):
    """Greedy matching on centre distance, globally sorted by ``(dist, i, j)``.

    ``predicted`` and ``detected`` are (n, 3) / (m, 3) centre arrays. Returns
    ``(pairs, unmatched_pred, unmatched_det)``.
    """
    P = np.asarray(predicted, dtype=np.float64).reshape(-1, 3)
    D = np.asarray(detected, dtype=np.float64).reshape(-1, 3)
    pairs = []
    if len(P) and len(D):
        dist = np.linalg.norm(P[:, None, :] - D[None, :, :], axis=2)
        ii, jj = np.nonzero(dist <= max_dist)
        order = np.lexsort((jj, ii, dist[ii, jj]))
        used_p, used_d = set(), set()
        for k in order:
            i, j = int(ii[k]), int(jj[k])
            if i in used_p or j in used_d:
                continue
            used_p.add(i)
            used_d.add(j)
            pairs.append((i, j))
    mp = {i for i, _ in pairs}
    md = {j for _, j in pairs}
    return pairs, [i for i in range(len(P)) if i not in mp], [j for j in range(len(D)) if j not in md]


@dataclass
class _Tracklet:
    entries: list
    motion: Motion
    detection: Optional[Detection]
    misses: int = 0


def _predict(tr: _Tracklet, direction: str) -> Box:
    last = tr.entries[-1].box
    if tr.detection is not None and tr.misses == 0:
        motion = rigid_motion(tr.detection.member_points, tr.detection.member_disp)
        if motion is not None:
            return (motion if direction == FORWARD else motion.inverse()).apply(last)
    return tr.motion.apply(last)


def _finish(tr: _Tracklet) -> list:
    entries = list(tr.entries)
    while entries and not entries[-1].observed:
        entries.pop()
    return entries


def track_sequence(detections: dict, params: TrackerParams, direction: str = FORWARD) -> list[Track]:
    """Run the tracklet lifecycle over ``{frame_index: [Detection, ...]}``.

    Tracklets spawn on unmatched detections farther than the gate from every
    prediction, coast on the predicted box for at most ``coast_steps`` frames,
    then terminate. Returned entries are in time order for both directions.
    """
    if direction not in (FORWARD, REVERSE):
        raise ValueError(f"unknown direction {direction!r}")
    frames = sorted(detections)
    if direction == REVERSE:
        frames = frames[::-1]
    active: list[_Tracklet] = []
    done: list[list] = []
    for t in frames:
        dets = detections[t]
        preds = [_predict(tr, direction) for tr in active]
        pairs, um_p, um_d = match_greedy(
            [b.center for b in preds], [d.box.center for d in dets], params.match_max_dist)
        survivors = []
        for i, j in pairs:
            tr, det = active[i], dets[j]
            prev = tr.entries[-1].box
            tr.motion = Motion(det.box.center - prev.center,
                               normalize_heading(det.box.heading - prev.heading))
            tr.entries.append(TrackEntry(t, det.box, True, det.source))
            tr.detection, tr.misses = det, 0
            survivors.append(tr)
        for i in um_p:
            tr = active[i]
            if tr.misses < params.coast_steps:
                tr.motion = Motion(preds[i].center - tr.entries[-1].box.center,
                                   normalize_heading(preds[i].heading - tr.entries[-1].box.heading))
                tr.entries.append(TrackEntry(t, preds[i], False, None))
                tr.misses += 1
                survivors.append(tr)
            else:
                done.append(_finish(tr))
        pred_centers = np.array([b.center for b in preds]).reshape(-1, 3)
        for j in um_d:
            det = dets[j]
            if len(pred_centers) and np.min(np.linalg.norm(pred_centers - det.box.center, axis=1)) <= params.match_max_dist:
                continue
            survivors.append(_Tracklet([TrackEntry(t, det.box, True, det.source)], Motion.zero(), det))
        active = survivors
    done.extend(_finish(tr) for tr in active)
    out = []
    for entries in done:
        if not entries:
            continue
        if direction == REVERSE:
            entries = entries[::-1]
        out.append(entries)
    out.sort(key=lambda es: (es[0].frame_index, es[0].source or ()))
    return [Track(k, es) for k, es in enumerate(out)]


def _split_invalid(entries, coast_steps: int) -> list[list]:
    """Split a merged entry list wherever the track invariants would break."""
    pieces, cur, run = [], [], 0

    def flush():
        while cur and not cur[-1].observed:
            cur.pop()
        if cur:
            pieces.append(list(cur))
        cur.clear()

    for e in entries:
        if cur and e.frame_index != cur[-1].frame_index + 1:
            flush()
            run = 0
        if e.observed:
            run = 0
            cur.append(e)
            continue
        run += 1
        if run > coast_steps:
            flush()
        elif cur:
            cur.append(e)
    flush()
    return pieces


def join_forward_reverse(fw: list[Track], rv: list[Track], coast_steps: int = 1) -> list[Track]:
    """Merge forward and reverse tracklets that share an observed source detection."""
    tracklets = [t.entries for t in fw] + [t.entries for t in rv]
    parent = list(range(len(tracklets)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner: dict = {}
    for k, entries in enumerate(tracklets):
        for e in entries:
            if not e.observed or e.source is None:
                continue
            if e.source in owner:
                a, b = find(owner[e.source]), find(k)
                if a != b:
                    parent[max(a, b)] = min(a, b)
            else:
                owner[e.source] = k

    groups: dict[int, list[int]] = {}
    for k in range(len(tracklets)):
        groups.setdefault(find(k), []).append(k)

    merged = []
    for members in groups.values():
        by_frame: dict[int, TrackEntry] = {}
        for k in sorted(members):
            for e in tracklets[k]:
                cur = by_frame.get(e.frame_index)
                if cur is None or (e.observed and not cur.observed):
                    by_frame[e.frame_index] = e
        entries = [by_frame[f] for f in sorted(by_frame)]
        merged.extend(_split_invalid(entries, coast_steps))
    merged.sort(key=lambda es: (es[0].frame_index, es[0].source or ()))
    return [Track(k, es) for k, es in enumerate(merged)]


def postfilter(tracks: list[Track], params: TrackerParams, mode: str = INITIAL) -> list[Track]:
    """Drop short or low-confidence tracks.

    In regeneration mode coasted entries take the track's median observed
    confidence.
    """
    if mode not in (INITIAL, REGENERATION):
        raise ValueError(f"unknown mode {mode!r}")
    kept = []
    for tr in tracks:
        if len(tr.entries) < params.min_track_len:
            continue
        med = tr.median_confidence()
        if med < params.min_median_conf:
            continue
        if mode == REGENERATION:
            entries = [e if e.observed else replace(e, box=replace(e.box, confidence=med)) for e in tr.entries]
            tr = Track(tr.track_id, entries)
        kept.append(tr)
    return [Track(k, t.entries) for k, t in enumerate(kept)]


def build_detections(frames, boxes_by_frame: dict, params: TrackerParams, poses=None) -> dict:
    """World-frame detections with member motion looked up inside each (inflated) box.

    Member points are the non-ground points inside the box; their displacement
    is the residual flow rotated into the world frame.
    """
    poses = poses if poses is not None else world_poses(frames)
    out = {}
    for k, frame in enumerate(frames):
        t = frame.timestamp_index
        W = poses[k]
        boxes = boxes_by_frame.get(t, [])
        f_dyn = None
        if frame.flow is not None and frame.pose_to_next is not None:
            f_dyn = residual_flow(frame)
            R_next = (W @ frame.pose_to_next).rotation
        keep = frame.non_ground()
        pts = frame.points[keep]
        dyn = f_dyn[keep] if f_dyn is not None else None
        dets = []
        for j, box in enumerate(boxes):
            det = Detection(box.transformed(W), (t, j))
            if dyn is not None and len(pts):
                inside = box.contains(pts, params.lookup_margin)
                if inside.any():
                    det.member_points = W.apply(pts[inside])
                    det.member_disp = dyn[inside] @ R_next.T
            dets.append(det)
        out[t] = dets
    return out


def run_tracker(frames, boxes_by_frame: dict, params: TrackerParams, mode: str = INITIAL,
                poses=None) -> list[Track]:
    """Forward + reverse tracking, joining and post-filtering; boxes in, world tracks out."""
    dets = build_detections(frames, boxes_by_frame, params, poses)
    fw = track_sequence(dets, params, FORWARD)
    rv = track_sequence(dets, params, REVERSE)
    return postfilter(join_forward_reverse(fw, rv, params.coast_steps), params, mode)


def tracks_to_records(tracks: list[Track], is_pseudo: bool = True) -> list[BoxRecord]:
    return [BoxRecord(e.frame_index, e.box, tr.track_id, is_pseudo, e.observed)
            for tr in tracks for e in tr.entries]


def records_to_tracks(records) -> list[Track]:
    by_id: dict[int, list[TrackEntry]] = {}
    for r in records:
        if r.track_id is None:
            raise ValueError("track records need a track_id")
        by_id.setdefault(r.track_id, []).append(TrackEntry(r.frame_index, r.box, r.observed))
    return [Track(tid, sorted(es, key=lambda e: e.frame_index)) for tid, es in sorted(by_id.items())]
