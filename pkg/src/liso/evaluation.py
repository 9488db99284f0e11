"""Detection metrics: rotated BEV / 3D IoU, AP with PR curves, orientation error."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .core import Box, boxes_to_array

BEV, THREE_D = "bev", "3d"


def iou_bev(a: Box, b: Box) -> float:
    return float(kernels.iou_matrix(a.as_array()[None, :7], b.as_array()[None, :7], False)[0, 0])


def iou_3d(a: Box, b: Box) -> float:
    return float(kernels.iou_matrix(a.as_array()[None, :7], b.as_array()[None, :7], True)[0, 0])


def iou_matrix(boxes_a, boxes_b, iou_space: str = BEV) -> np.ndarray:
    if iou_space not in (BEV, THREE_D):
        raise ValueError(f"unknown iou space {iou_space!r}")
    A = boxes_to_array(list(boxes_a))[:, :7]
    B = boxes_to_array(list(boxes_b))[:, :7]
    return kernels.iou_matrix(A, B, iou_space == THREE_D)


@dataclass
class EvalConfig:
    iou_thresholds: tuple = (0.3, 0.5)
    iou_space: str = BEV
    region: Optional[tuple] = (100.0, 100.0)  # full BEV extent (x, y) around the ego
    crop_predictions_only: bool = False
    min_pr_clip: Optional[float] = None
    moving_threshold: float = 1.0  # m/s

    def validate(self) -> None:
        if not self.iou_thresholds or any(not 0 < t < 1 for t in self.iou_thresholds):
            raise ValueError("iou thresholds must lie in (0, 1)")
        if self.iou_space not in (BEV, THREE_D):
            raise ValueError(f"unknown iou space {self.iou_space!r}")
        if self.region is not None and (len(self.region) != 2 or min(self.region) <= 0):
            raise ValueError("region must be two positive extents")
        if self.min_pr_clip is not None and not 0 <= self.min_pr_clip < 1:
            raise ValueError("min_pr_clip must be in [0, 1)")


@dataclass
class APResult:
    ap: float
    precision: np.ndarray
    recall: np.ndarray
    scores: np.ndarray
    aoe: float
    aoe_pi: float
    num_gt: int
    num_pred: int
    tp: int = 0
    threshold: float = 0.0


def in_region(box: Box, region) -> bool:
    if region is None:
        return True
    return abs(box.x) <= 0.5 * region[0] and abs(box.y) <= 0.5 * region[1]


def heading_error(a: float, b: float, period: float = 2 * math.pi) -> float:
    """Smallest absolute difference of two angles modulo ``period``."""
    d = math.fmod(abs(a - b), period)
    return min(d, period - d)


def pr_area(precision: np.ndarray, recall: np.ndarray, min_pr_clip: Optional[float] = None) -> float:
    """Trapezoidal area under the PR curve, starting flat from recall 0.

    With ``min_pr_clip`` every point whose precision or recall is below the
    clip has its precision zeroed first.
    """
    if len(precision) == 0:
        return 0.0
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    if min_pr_clip is not None:
        p = np.where((p < min_pr_clip) | (r < min_pr_clip), 0.0, p)
    p = np.concatenate([[p[0]], p])
    r = np.concatenate([[0.0], r])
    # fsum: correctly rounded, so the result does not depend on summation order
    return math.fsum((np.diff(r) * (p[1:] + p[:-1]) / 2).tolist())


def average_precision(preds: dict, gts: dict, threshold: float, iou_space: str = BEV,
                      min_pr_clip: Optional[float] = None, region=None,
                      crop_predictions_only: bool = False, ignore: Optional[dict] = None) -> APResult:
    """AP of ``{frame: [Box]}`` predictions against ground truth at one IoU threshold.

    Predictions are visited by descending confidence (ties keep frame order,
    then list order) and matched to the unmatched ground-truth box of highest
    IoU >= ``threshold`` in the same frame. Predictions matching an ``ignore``
    box instead are dropped from the curve.
    """
    ignore = ignore or {}
    frames = sorted(set(preds) | set(gts))
    flat = []
    gt_by_frame, ign_by_frame = {}, {}
    n_gt = 0
    for f in frames:
        g = [b for b in gts.get(f, []) if crop_predictions_only or in_region(b, region)]
        gt_by_frame[f] = g
        ign_by_frame[f] = list(ignore.get(f, []))
        n_gt += len(g)
        for k, b in enumerate(preds.get(f, [])):
            if in_region(b, region):
                flat.append((f, k, b))
    order = sorted(range(len(flat)), key=lambda i: -flat[i][2].confidence)

    ious = {f: iou_matrix([b for ff, _, b in flat if ff == f], gt_by_frame[f], iou_space) for f in frames}
    ign_ious = {f: iou_matrix([b for ff, _, b in flat if ff == f], ign_by_frame[f], iou_space) for f in frames}
    row_of = {}
    counters: dict = {}
    for i, (f, _, _) in enumerate(flat):
        row_of[i] = counters.get(f, 0)
        counters[f] = row_of[i] + 1

    matched = {f: np.zeros(len(gt_by_frame[f]), dtype=bool) for f in frames}
    tp_flags, scores, errs, errs_pi = [], [], [], []
    for i in order:
        f, _, box = flat[i]
        row = ious[f][row_of[i]] if len(gt_by_frame[f]) else np.zeros(0)
        cand = np.where(~matched[f] & (row >= threshold), row, -1.0)
        if len(cand) and cand.max() >= 0:
            j = int(np.argmax(cand))
            matched[f][j] = True
            tp_flags.append(True)
            g = gt_by_frame[f][j]
            errs.append(heading_error(box.heading, g.heading))
            errs_pi.append(heading_error(box.heading, g.heading, math.pi))
        else:
            ign_row = ign_ious[f][row_of[i]] if len(ign_by_frame[f]) else np.zeros(0)
            if len(ign_row) and ign_row.max() >= threshold:
                continue
            tp_flags.append(False)
        scores.append(box.confidence)

    tp = np.cumsum(np.array(tp_flags, dtype=np.int64))
    fp = np.cumsum(~np.array(tp_flags, dtype=bool))
    if len(tp):
        precision = tp / (tp + fp)
        recall = tp / n_gt if n_gt else np.zeros(len(tp))
    else:
        precision = recall = np.zeros(0)
    ap = pr_area(precision, recall, min_pr_clip) if n_gt else 0.0
    return APResult(
        ap=ap, precision=precision, recall=recall, scores=np.array(scores),
        aoe=float(np.mean(errs)) if errs else float("nan"),
        aoe_pi=float(np.mean(errs_pi)) if errs_pi else float("nan"),
        num_gt=n_gt, num_pred=len(tp_flags), tp=int(tp[-1]) if len(tp) else 0, threshold=threshold,
    )


def evaluate(preds: dict, gts: dict, config: EvalConfig, ignore: Optional[dict] = None) -> dict[float, APResult]:
    config.validate()
    return {t: average_precision(preds, gts, t, config.iou_space, config.min_pr_clip, config.region,
                                 config.crop_predictions_only, ignore)
            for t in config.iou_thresholds}


class MotionSplit(NamedTuple):
    moving: Optional[dict]
    still: Optional[dict]
    movable: dict


def split_moving_still(gts: dict, speeds: Optional[dict], threshold: float = 1.0) -> MotionSplit:
    """Partition ``{frame: [BoxRecord]}`` by ground-truth speed (strictly faster = moving).

    Without speeds for every box, warn and return only the combined pool.
    """
    movable = {f: [r.box for r in recs] for f, recs in gts.items()}
    keys = [(f, r.track_id) for f, recs in gts.items() for r in recs]
    if speeds is None or any(k not in speeds for k in keys):
        warnings.warn("ground-truth speeds missing; returning a single movable pool", stacklevel=2)
        return MotionSplit(None, None, movable)
    moving = {f: [r.box for r in recs if speeds[(f, r.track_id)] > threshold] for f, recs in gts.items()}
    still = {f: [r.box for r in recs if speeds[(f, r.track_id)] <= threshold] for f, recs in gts.items()}
    return MotionSplit(moving, still, movable)


@dataclass
class PRStats:
    precision: float
    recall: float
    tp: int
    num_pred: int
    num_gt: int
    extra: dict = field(default_factory=dict)


def precision_recall(preds: dict, gts: dict, threshold: float = 0.4, iou_space: str = BEV,
                     ignore: Optional[dict] = None) -> PRStats:
    """Precision and recall of a label set (no confidence threshold)."""
    res = average_precision(preds, gts, threshold, iou_space, ignore=ignore)
    prec = res.tp / res.num_pred if res.num_pred else 1.0
    rec = res.tp / res.num_gt if res.num_gt else 1.0
    return PRStats(prec, rec, res.tp, res.num_pred, res.num_gt)


def write_pr_curve(results: dict[float, APResult], path) -> None:
    lines = ["threshold,rank,score,precision,recall"]
    for t, res in sorted(results.items()):
        for k, (s, p, r) in enumerate(zip(res.scores, res.precision, res.recall)):
            lines.append(f"{t!r},{k},{float(s)!r},{float(p)!r},{float(r)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def format_report(results: dict[float, APResult], title: str = "") -> str:
    lines = [f"# {title}"] if title else []
    lines.append("threshold ap aoe aoe_pi tp num_pred num_gt")
    for t, r in sorted(results.items()):
        lines.append(f"{t:.2f} {r.ap:.6f} {r.aoe:.6f} {r.aoe_pi:.6f} {r.tp} {r.num_pred} {r.num_gt}")
    return "\n".join(lines) + "\n"
