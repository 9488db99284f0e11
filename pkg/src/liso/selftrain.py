"""Trajectory-regularised self-training over a pluggable single-frame detector."""
from __future__ import annotations

import logging
import math
import shlex
import subprocess
import tempfile
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .cluster import box_from_heading, cluster_sequence, labels_to_clusters, min_area_heading, ClusterParams
from .core import Box, PointFrame, boxes_to_array, normalize_heading, points_to_box_frame, world_poses
from .io import BoxRecord, load_manifest, read_boxes, read_sequence, write_boxes
from .tracker import INITIAL, REGENERATION, Track, TrackerParams, run_tracker
from .trackopt import SmoothParams, optimize_tracks

log = logging.getLogger(__name__)


@dataclass
class SelfTrainSchedule:
    steps_per_round: int = 30000
    rounds_per_weight_drop: int = 2
    total_rounds: int = 0

    def validate(self) -> None:
        if self.steps_per_round < 1 or self.rounds_per_weight_drop < 1 or self.total_rounds < 0:
            raise ValueError("selftrain: steps_per_round, rounds_per_weight_drop >= 1; total_rounds >= 0")


@dataclass
class AugmentParams:
    max_rotation: float = math.pi
    scale_range: tuple = (0.95, 1.05)
    max_translation: float = 5.0
    min_inserted: int = 1
    max_inserted: int = 15
    keep_fraction: tuple = (0.3, 1.0)
    insert_extent: float = 40.0
    insert_attempts: int = 20

    def validate(self) -> None:
        lo, hi = self.scale_range
        klo, khi = self.keep_fraction
        if not (0 < lo <= hi and 0 < klo <= khi <= 1):
            raise ValueError("augment: bad scale_range or keep_fraction")
        if not (1 <= self.min_inserted <= self.max_inserted) or self.insert_attempts < 1:
            raise ValueError("augment: need 1 <= min_inserted <= max_inserted and insert_attempts >= 1")
        if self.max_translation < 0 or self.insert_extent <= 0 or self.max_rotation < 0:
            raise ValueError("augment: extents must be non-negative")


@dataclass
class SequenceData:
    seq_id: str
    frames: list
    frame_interval_s: float
    poses: list = None
    root: Optional[Path] = None

    def __post_init__(self):
        if self.poses is None:
            self.poses = world_poses(self.frames)

    @classmethod
    def load(cls, seq_dir) -> SequenceData:
        m = load_manifest(seq_dir)
        return cls(m.sequence_id, read_sequence(m), m.frame_interval_s, root=Path(seq_dir))


@dataclass
class BankObject:
    box: Box
    local_points: np.ndarray


@dataclass
class PseudoGT:
    """Per-sequence pseudo labels (ego coordinates) plus the object bank."""

    records: dict = field(default_factory=dict)  # seq_id -> [BoxRecord]
    bank: list = field(default_factory=list)
    labels: dict = field(init=False)  # seq_id -> frame -> [Box]

    def __post_init__(self):
        self.labels = {}
        for sid, recs in self.records.items():
            frames = self.labels.setdefault(sid, {})
            for r in recs:
                frames.setdefault(r.frame_index, []).append(r.box)

    def num_boxes(self) -> int:
        return sum(len(r) for r in self.records.values())

    def frame_labels(self, seq_id: str, t: int) -> list[Box]:
        return self.labels.get(seq_id, {}).get(t, [])


def build_pseudo_gt(tracks_by_seq: dict, sequences: Optional[dict] = None,
                    include_coasted: bool = False) -> PseudoGT:
    """Collect per-frame labels from world-frame tracks and extract the object bank.

    Only observed entries become labels unless ``include_coasted``. With
    ``sequences`` boxes are moved into each frame's ego coordinates and bank
    entries carry the non-ground points inside the box (box-local); without
    them boxes stay as given and bank entries are empty.
    """
    bank = []
    records = {}
    for seq_id in sorted(tracks_by_seq):
        seq = (sequences or {}).get(seq_id)
        frames = {f.timestamp_index: (k, f) for k, f in enumerate(seq.frames)} if seq else {}
        inv = {}
        recs = []
        for tr in tracks_by_seq[seq_id]:
            for e in tr.entries:
                if not e.observed and not include_coasted:
                    continue
                box = e.box
                if e.frame_index in frames:
                    k, _ = frames[e.frame_index]
                    if k not in inv:
                        inv[k] = seq.poses[k].inverse()
                    box = box.transformed(inv[k])
                recs.append(BoxRecord(e.frame_index, box, tr.track_id, is_pseudo=True, observed=e.observed))
        # file order, so a database rebuilt from written labels has the same bank
        recs.sort(key=BoxRecord.sort_key)
        for r in recs:
            pts = bank_points(frames[r.frame_index][1], r.box) if r.frame_index in frames else np.zeros((0, 3))
            bank.append(BankObject(r.box, pts))
        records[seq_id] = recs
    return PseudoGT(records, bank)


def bank_points(frame: PointFrame, box: Box) -> np.ndarray:
    """Non-ground points of ``frame`` inside the ego-frame ``box``, in box coordinates."""
    cand = frame.points[frame.non_ground()]
    return points_to_box_frame(cand[box.contains(cand)], box)


def pseudo_gt_from_records(records_by_seq: dict, sequences: dict) -> PseudoGT:
    """Rebuild a database (bank included) from ego-frame pseudo-label records."""
    bank = []
    records = {}
    for sid in sorted(records_by_seq):
        seq = sequences[sid]
        frames = {f.timestamp_index: f for f in seq.frames}
        recs = [r for r in records_by_seq[sid] if r.observed]
        for r in recs:
            if r.frame_index not in frames:
                raise ValueError(f"{sid}: pseudo label for unknown frame {r.frame_index}")
            bank.append(BankObject(r.box, bank_points(frames[r.frame_index], r.box)))
        records[sid] = recs
    return PseudoGT(records, bank)


# --- augmentation --------------------------------------------------------


@dataclass
class GlobalAug:
    angle: float = 0.0
    scale: float = 1.0
    shift: tuple = (0.0, 0.0, 0.0)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return self.scale * (np.asarray(points) @ R.T) + np.asarray(self.shift)

    def apply_box(self, b: Box) -> Box:
        c = self.apply_points(b.center[None])[0]
        return Box(c[0], c[1], c[2], b.l * self.scale, b.w * self.scale, b.h * self.scale,
                   normalize_heading(b.heading + self.angle), b.confidence)


def sample_global_aug(rng: np.random.Generator, params: AugmentParams) -> GlobalAug:
    angle = float(rng.uniform(-params.max_rotation, params.max_rotation))
    scale = float(rng.uniform(*params.scale_range))
    # uniform in a ball: direction from a normal draw, radius by the cube-root rule
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    shift = tuple(float(v) for v in d * params.max_translation * rng.random() ** (1.0 / 3.0))
    return GlobalAug(angle, scale, shift)


def augment(frame: PointFrame, labels: list[Box], bank: list[BankObject], seed,
            params: Optional[AugmentParams] = None, global_aug: Optional[GlobalAug] = None):
    """Global similarity transform, then paste 1..15 bank objects at free spots.

    Returns an appearance-only frame and its labels. Inserted objects keep a
    random subset of their points and never overlap an existing label in BEV.
    """
    params = params or AugmentParams()
    rng = np.random.default_rng(seed)
    g = global_aug if global_aug is not None else sample_global_aug(rng, params)
    points = g.apply_points(frame.points)
    ground = frame.ground_mask.copy() if frame.ground_mask is not None else np.zeros(len(points), dtype=bool)
    out_labels = [g.apply_box(b) for b in labels]
    n_orig = len(out_labels)
    if bank:
        k = int(rng.integers(params.min_inserted, params.max_inserted + 1))
        picks = rng.choice(len(bank), size=min(k, len(bank)), replace=False)
        new_pts, new_ground = [points], [ground]
        for idx in picks:
            obj = bank[int(idx)]
            for _ in range(params.insert_attempts):
                x, y = rng.uniform(-params.insert_extent, params.insert_extent, 2)
                cand = replace(obj.box, x=float(x), y=float(y),
                               heading=normalize_heading(float(rng.uniform(-math.pi, math.pi))))
                if out_labels:
                    A = boxes_to_array(out_labels)[:, :7]
                    inter = [kernels.bev_intersection(cand.as_array()[:7], a) for a in A]
                    if max(inter) > 0.0:
                        continue
                keep_frac = rng.uniform(*params.keep_fraction)
                m = len(obj.local_points)
                sel = rng.random(m) < keep_frac
                local = obj.local_points[sel]
                c, s = math.cos(cand.heading), math.sin(cand.heading)
                world = np.c_[c * local[:, 0] - s * local[:, 1] + cand.x,
                              s * local[:, 0] + c * local[:, 1] + cand.y,
                              local[:, 2] + cand.z] if len(local) else np.zeros((0, 3))
                occupied = cand.contains(np.concatenate(new_pts))
                new_pts = [np.concatenate(new_pts)[~occupied], world]
                new_ground = [np.concatenate(new_ground)[~occupied], np.zeros(len(world), dtype=bool)]
                out_labels.append(cand)
                break
        points = np.concatenate(new_pts)
        ground = np.concatenate(new_ground)
    log.debug("augment: %d labels, %d inserted", len(out_labels), len(out_labels) - n_orig)
    return PointFrame(frame.timestamp_index, points, None, ground, None), out_labels


# --- detectors -----------------------------------------------------------


class DetectorError(RuntimeError):
    pass


class RoundAborted(RuntimeError):
    pass


class Detector(ABC):
    """Single-frame detector contract: motion-blind inference, opaque weights."""

    @abstractmethod
    def train(self, database: PseudoGT, sequences: dict, steps: int, weights=None, seed: int = 0):
        """Return new weights; ``weights=None`` means start from scratch."""

    @abstractmethod
    def infer(self, frame: PointFrame, weights) -> list[Box]:
        """Boxes with confidences in [0, 1] for an appearance-only frame."""

    def infer_sequence(self, seq: SequenceData, weights) -> dict[int, list[Box]]:
        return {f.timestamp_index: self.infer(f.appearance_view(), weights) for f in seq.frames}


@dataclass
class MockWeights:
    signatures: np.ndarray  # (k, 3) sorted-extent size signatures
    densities: np.ndarray  # (k,) points per m^2 of visible surface
    samples: int = 0


def _signature(box: Box) -> np.ndarray:
    return np.array([max(box.l, box.w), min(box.l, box.w), box.h])


def _fit(points: np.ndarray) -> Box:
    return box_from_heading(points, min_area_heading(points[:, :2]))


def _surface(sig) -> float:
    l, w, h = sig
    return l * w + 2 * l * h + 2 * w * h


class MockDetector(Detector):
    """Appearance-only stand-in for a neural detector.

    Training memorises the size signature and point density of the box fitted
    to the points inside each (augmented) pseudo label. Inference clusters
    non-ground points in 3D, fits a minimum-area box to each cluster and scores
    it by similarity to memory.
    """

    def __init__(self, size_tolerance=0.15, density_log_sigma=0.7, min_confidence=0.1,
                 eps=1.0, min_pts=5, augment_params: Optional[AugmentParams] = None):
        self.size_tolerance = size_tolerance
        self.density_log_sigma = density_log_sigma
        self.min_confidence = min_confidence
        self.eps = eps
        self.min_pts = min_pts
        self.augment_params = augment_params or AugmentParams()

    def train(self, database, sequences, steps, weights=None, seed=0):
        sigs, dens = [], []
        if weights is not None:
            sigs.extend(weights.signatures)
            dens.extend(weights.densities)
        keys = [(sid, t) for sid in sorted(database.labels) for t in sorted(database.labels[sid])
                if database.labels[sid][t]]
        n = min(int(steps), len(keys))
        for step in range(n):
            sid, t = keys[step]
            seq = sequences[sid]
            frame = next(f for f in seq.frames if f.timestamp_index == t)
            view, labels = augment(frame.appearance_view(), database.labels[sid][t], database.bank,
                                   (seed, step), self.augment_params)
            pts = view.points[view.non_ground()]
            for b in labels:
                inside = pts[b.contains(pts, 0.05)]
                if len(inside) < self.min_pts:
                    continue
                # memorise what inference will measure: the box fitted to the label's points
                sig = _signature(_fit(inside))
                sigs.append(sig)
                dens.append(len(inside) / _surface(sig))
        if not sigs:
            return MockWeights(np.zeros((0, 3)), np.zeros(0), n)
        return _compress(np.array(sigs), np.array(dens), n + (weights.samples if weights else 0))

    def infer(self, frame, weights):
        if frame.flow is not None or frame.pose_to_next is not None:
            raise AssertionError("MockDetector must only see appearance (no flow, no ego pose)")
        if weights is None or len(weights.signatures) == 0:
            return []
        pts = frame.points[frame.non_ground()]
        if len(pts) == 0:
            return []
        labels = kernels.dbscan_labels(pts, self.eps, self.min_pts)
        out = []
        for members in labels_to_clusters(labels):
            cp = pts[members]
            box = _fit(cp)
            conf = self.score(box, len(cp), weights)
            if conf >= self.min_confidence:
                out.append(replace(box, confidence=conf))
        return out

    def score(self, box: Box, count: int, weights: MockWeights) -> float:
        sig = _signature(box)
        rel = np.max(np.abs(weights.signatures - sig) / weights.signatures, axis=1)
        size_sim = np.exp(-(rel / self.size_tolerance) ** 2)
        dens = count / _surface(sig)
        dens_sim = np.exp(-0.5 * (np.log(max(dens, 1e-9) / weights.densities) / self.density_log_sigma) ** 2)
        return float(np.clip(np.max(size_sim * dens_sim), 0.0, 1.0))


def _compress(sigs: np.ndarray, dens: np.ndarray, samples: int) -> MockWeights:
    # one prototype per 10 cm size cell, deterministic order
    keys = np.round(sigs / 0.1).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    proto = np.array([sigs[inv == k].mean(axis=0) for k in range(len(uniq))])
    pdens = np.array([np.exp(np.log(dens[inv == k]).mean()) for k in range(len(uniq))])
    return MockWeights(proto, pdens, samples)


def save_mock_weights(w: MockWeights, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, signatures=w.signatures, densities=w.densities, samples=np.array(w.samples))


def load_mock_weights(path) -> MockWeights:
    with np.load(path) as z:
        return MockWeights(z["signatures"], z["densities"], int(z["samples"]))


class SubprocessDetector(Detector):
    """Detector behind a command line, exchanging the io file formats.

    ``<cmd> train --workdir W --sequences LIST --steps S --seed N --weights-in PATH|fresh --weights-out PATH``
    reads ``W/pseudo_gt/<seq_id>.txt`` and the sequence dirs listed in LIST.
    ``<cmd> infer --seq DIR --weights PATH --out detections.txt`` writes ego-frame boxes.
    A non-zero exit code is a failure.
    """

    def __init__(self, command: str, workdir=None):
        self.command = shlex.split(command)
        self.workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="liso-det-"))
        self._calls = 0

    def _run(self, args):
        proc = subprocess.run(self.command + args, capture_output=True, text=True)
        if proc.returncode != 0:
            raise DetectorError(f"detector command failed ({proc.returncode}): {proc.stderr.strip()[-500:]}")

    def train(self, database, sequences, steps, weights=None, seed=0):
        self._calls += 1
        w = self.workdir
        (w / "pseudo_gt").mkdir(parents=True, exist_ok=True)
        lines = []
        for sid in sorted(sequences):
            seq = sequences[sid]
            if seq.root is None:
                raise DetectorError(f"sequence {sid} has no directory on disk")
            write_boxes(database.records.get(sid, []), w / "pseudo_gt" / f"{sid}.txt")
            lines.append(str(seq.root))
        (w / "sequences.txt").write_text("\n".join(lines) + "\n")
        out = w / f"weights_{self._calls:03d}.bin"
        self._run(["train", "--workdir", str(w), "--sequences", str(w / "sequences.txt"),
                   "--steps", str(steps), "--seed", str(seed),
                   "--weights-in", str(weights) if weights else "fresh", "--weights-out", str(out)])
        return out

    def infer(self, frame, weights):
        raise DetectorError("SubprocessDetector infers whole sequences; use infer_sequence")

    def infer_sequence(self, seq, weights):
        if seq.root is None:
            raise DetectorError(f"sequence {seq.seq_id} has no directory on disk")
        out = self.workdir / f"detections_{seq.seq_id}.txt"
        self._run(["infer", "--seq", str(seq.root), "--weights", str(weights), "--out", str(out)])
        result = {f.timestamp_index: [] for f in seq.frames}
        for r in read_boxes(out):
            result.setdefault(r.frame_index, []).append(r.box)
        return result


# --- orchestration -------------------------------------------------------


def nms_bev(boxes: list[Box], threshold: float = 0.1) -> list[Box]:
    """Keep boxes by descending confidence, dropping any with BEV IoU > threshold to a kept one."""
    if not boxes:
        return []
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].confidence)
    A = boxes_to_array(boxes)[:, :7]
    iou = kernels.iou_matrix(A, A, False)
    kept = []
    for i in order:
        if all(iou[i, j] <= threshold for j in kept):
            kept.append(i)
    return [boxes[i] for i in sorted(kept)]


@dataclass
class RoundLog:
    round_index: int
    num_boxes: int
    num_tracks: int
    weights_dropped: bool


@dataclass
class SelfTrainState:
    round_index: int
    database: PseudoGT
    weights: object = None
    history: list = field(default_factory=list)


def regenerate(detections_by_seq: dict, sequences: dict, tracker_params: TrackerParams,
               smooth_params: SmoothParams, mode: str) -> tuple[dict, int]:
    tracks = {}
    n_tracks = 0
    for sid in sorted(sequences):
        seq = sequences[sid]
        tr = run_tracker(seq.frames, detections_by_seq[sid], tracker_params, mode, seq.poses)
        tracks[sid] = optimize_tracks(tr, smooth_params, seq.frame_interval_s)
        n_tracks += len(tracks[sid])
    return tracks, n_tracks


def initial_state(sequences: dict, cluster_params: ClusterParams, tracker_params: TrackerParams,
                  smooth_params: SmoothParams) -> SelfTrainState:
    """Round-0 database from flow clustering, tracking and track optimisation."""
    dets = {sid: cluster_sequence(seq.frames, cluster_params, seq.frame_interval_s)
            for sid, seq in sequences.items()}
    tracks, n_tracks = regenerate(dets, sequences, tracker_params, smooth_params, INITIAL)
    db = build_pseudo_gt(tracks, sequences)
    return SelfTrainState(0, db, None, [RoundLog(0, db.num_boxes(), n_tracks, False)])


def run_round(state: SelfTrainState, schedule: SelfTrainSchedule, detector: Detector, sequences: dict,
              tracker_params: TrackerParams, smooth_params: SmoothParams, nms_threshold: float = 0.1,
              seed: int = 0) -> SelfTrainState:
    """Train, re-detect, re-track and smooth; returns a new state.

    Weights are discarded after every ``rounds_per_weight_drop``-th round.
    Detector failures raise :class:`RoundAborted`; ``state`` is never modified.
    """
    k = state.round_index + 1
    try:
        weights = detector.train(state.database, sequences, schedule.steps_per_round, state.weights,
                                 seed=seed * 1000 + k)
        dets = {}
        for sid in sorted(sequences):
            raw = detector.infer_sequence(sequences[sid], weights)
            dets[sid] = {t: nms_bev(b, nms_threshold) for t, b in raw.items()}
    except Exception as exc:
        raise RoundAborted(f"round {k}: detector failed: {exc}") from exc
    tracks, n_tracks = regenerate(dets, sequences, tracker_params, smooth_params, REGENERATION)
    db = build_pseudo_gt(tracks, sequences)
    drop = k % schedule.rounds_per_weight_drop == 0
    log.info("round %d: %d boxes in %d tracks%s", k, db.num_boxes(), n_tracks,
             ", weights dropped" if drop else "")
    return SelfTrainState(k, db, None if drop else weights,
                          state.history + [RoundLog(k, db.num_boxes(), n_tracks, drop)])


def self_train(state: SelfTrainState, schedule: SelfTrainSchedule, detector: Detector, sequences: dict,
               tracker_params: TrackerParams, smooth_params: SmoothParams, nms_threshold: float = 0.1,
               seed: int = 0, on_round=None) -> list[SelfTrainState]:
    """Run ``schedule.total_rounds`` rounds; stops early (keeping prior states) if one aborts."""
    schedule.validate()
    states = [state]
    for _ in range(schedule.total_rounds):
        try:
            state = run_round(state, schedule, detector, sequences, tracker_params, smooth_params,
                              nms_threshold, seed)
        except RoundAborted as exc:
            log.error("%s; keeping database of round %d", exc, state.round_index)
            break
        states.append(state)
        if on_round is not None:
            on_round(state)
    return states


def load_sequences(root) -> dict[str, SequenceData]:
    from .io import find_sequences

    seqs = {}
    for d in find_sequences(root):
        s = SequenceData.load(d)
        if s.seq_id in seqs:
            raise ValueError(f"duplicate sequence id {s.seq_id}")
        seqs[s.seq_id] = s
    return seqs


def tracks_from_records(records_by_seq: dict) -> dict[str, list[Track]]:
    from .tracker import records_to_tracks

    return {sid: records_to_tracks(recs) for sid, recs in records_by_seq.items()}
