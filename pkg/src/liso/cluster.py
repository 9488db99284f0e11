"""Moving-object proposals from scene flow: residual flow, 6D DBSCAN, box fitting."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .core import Box, PointFrame, normalize_heading

log = logging.getLogger(__name__)

MIN_EXTENT = 1e-3


@dataclass
class ClusterParams:
    static_speed_threshold: float = 1.0  # m/s
    dbscan_eps: float = 1.0
    dbscan_min_pts: int = 5
    max_aspect: float = 4.0
    min_area: float = 0.35  # m^2
    min_volume: float = 0.5  # m^3
    flow_feature_scale: float = 1.0
    ground_clearance: float = 0.25  # fallback ground filter only

    def validate(self) -> None:
        for name in ("static_speed_threshold", "dbscan_eps", "max_aspect", "min_area",
                     "min_volume", "flow_feature_scale", "ground_clearance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"cluster.{name} must be positive")
        if int(self.dbscan_min_pts) < 1:
            raise ValueError("cluster.dbscan_min_pts must be >= 1")


def residual_flow(frame: PointFrame) -> np.ndarray:
    """Flow not explained by ego-motion: ``f - ((T^-1 - I) p)``."""
    if frame.flow is None or frame.pose_to_next is None:
        raise ValueError(f"frame {frame.timestamp_index} needs flow and pose_to_next")
    p = frame.points
    static_flow = frame.pose_to_next.inverse().apply(p) - p
    return frame.flow - static_flow


def estimate_ground_mask(points: np.ndarray, clearance: float = 0.25, iterations: int = 200,
                         seed: int = 0) -> np.ndarray:
    """RANSAC plane fit; points within ``clearance`` of a near-horizontal plane are ground."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    mask = np.zeros(n, dtype=bool)
    if n < 3:
        return mask
    rng = np.random.default_rng(seed)
    best = 0
    for _ in range(iterations):
        a, b, c = points[rng.choice(n, 3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-9 or abs(normal[2]) / norm < 0.9:
            continue
        normal /= norm
        inliers = np.abs((points - a) @ normal) <= clearance
        if inliers.sum() > best:
            best = int(inliers.sum())
            mask = inliers
    if best < 0.1 * n:
        return np.zeros(n, dtype=bool)
    return mask


def ground_mask_for(frame: PointFrame, params: ClusterParams) -> np.ndarray:
    if frame.ground_mask is not None:
        return frame.ground_mask
    return estimate_ground_mask(frame.points, params.ground_clearance, seed=frame.timestamp_index)


def filter_static(points, f_dyn, params: ClusterParams, frame_interval_s: float,
                  ground_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Indices of non-ground points whose residual speed exceeds the threshold."""
    f_dyn = np.asarray(f_dyn, dtype=np.float64).reshape(-1, 3)
    speed = np.linalg.norm(f_dyn, axis=1) / frame_interval_s
    keep = speed > params.static_speed_threshold
    if ground_mask is not None:
        keep &= ~np.asarray(ground_mask, dtype=bool)
    return np.flatnonzero(keep)


def cluster_6d(points, f_dyn, params: ClusterParams) -> list[np.ndarray]:
    """DBSCAN over ``(x, y, z, s*dx, s*dy, s*dz)``; returns index arrays, noise dropped."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return []
    feats = np.hstack([points, params.flow_feature_scale * np.asarray(f_dyn, dtype=np.float64).reshape(-1, 3)])
    labels = kernels.dbscan_labels(feats, params.dbscan_eps, int(params.dbscan_min_pts))
    return labels_to_clusters(labels)


def labels_to_clusters(labels: np.ndarray) -> list[np.ndarray]:
    if len(labels) == 0 or labels.max() < 0:
        return []
    return [np.flatnonzero(labels == k) for k in range(int(labels.max()) + 1)]


def _convex_hull(xy: np.ndarray) -> np.ndarray:
    pts = sorted(set(map(tuple, xy)))
    if len(pts) < 3:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def min_area_heading(xy: np.ndarray) -> float:
    """Heading of the minimum-area enclosing rectangle, long side along the heading."""
    hull = _convex_hull(np.asarray(xy, dtype=np.float64))
    if len(hull) < 2:
        return 0.0
    if len(hull) == 2:
        d = hull[1] - hull[0]
        return normalize_heading(math.atan2(d[1], d[0]))
    best_area, best = math.inf, (0.0, 0.0, 0.0)
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        ang = math.atan2(e[1], e[0])
        c, s = math.cos(ang), math.sin(ang)
        u = hull @ np.array([c, s])
        v = hull @ np.array([-s, c])
        du, dv = u.max() - u.min(), v.max() - v.min()
        if du * dv < best_area - 1e-12:
            best_area, best = du * dv, (ang, du, dv)
    ang, du, dv = best
    if dv > du:
        ang += 0.5 * math.pi
    # fold to a canonical half-turn so the fit does not flip between frames
    ang = math.fmod(ang, math.pi)
    if ang < -0.5 * math.pi:
        ang += math.pi
    elif ang >= 0.5 * math.pi:
        ang -= math.pi
    return normalize_heading(ang)


def box_from_heading(points: np.ndarray, heading: float, confidence: float = 1.0) -> Box:
    """Tightest box with the given heading around ``points``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    c, s = math.cos(heading), math.sin(heading)
    u = points[:, 0] * c + points[:, 1] * s
    v = -points[:, 0] * s + points[:, 1] * c
    z = points[:, 2]
    mu, mv, mz = 0.5 * (u.max() + u.min()), 0.5 * (v.max() + v.min()), 0.5 * (z.max() + z.min())
    l = max(u.max() - u.min(), MIN_EXTENT)
    w = max(v.max() - v.min(), MIN_EXTENT)
    h = max(z.max() - z.min(), MIN_EXTENT)
    return Box(mu * c - mv * s, mu * s + mv * c, mz, l, w, h, heading, confidence)


class BoxFit(NamedTuple):
    box: Box
    heading_from_flow: bool


def fit_box(points, f_dyn) -> BoxFit:
    """Fit a box aligned with the mean BEV residual flow (confidence 1).

    Falls back to the minimum-area rectangle heading when the mean flow
    vanishes; ``heading_from_flow`` is then False.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot fit a box to an empty cluster")
    mean = np.asarray(f_dyn, dtype=np.float64).reshape(-1, 3)[:, :2].mean(axis=0)
    if np.hypot(*mean) > 1e-9:
        return BoxFit(box_from_heading(points, math.atan2(mean[1], mean[0])), True)
    log.debug("zero mean flow; using minimum-area rectangle heading")
    return BoxFit(box_from_heading(points, min_area_heading(points[:, :2])), False)


def is_plausible(box: Box, params: ClusterParams) -> bool:
    aspect = max(box.l, box.w) / min(box.l, box.w)
    return (aspect <= params.max_aspect and box.l * box.w >= params.min_area
            and box.volume >= params.min_volume)


def discard_degenerate(boxes, params: ClusterParams) -> list[Box]:
    return [b for b in boxes if is_plausible(b, params)]


def cluster_frame(frame: PointFrame, params: ClusterParams, frame_interval_s: float) -> list[Box]:
    """All plausible moving-object boxes of one frame, in the frame's ego coordinates."""
    if frame.flow is None or frame.pose_to_next is None:
        return []
    f_dyn = residual_flow(frame)
    idx = filter_static(frame.points, f_dyn, params, frame_interval_s, ground_mask_for(frame, params))
    boxes = []
    for members in cluster_6d(frame.points[idx], f_dyn[idx], params):
        sel = idx[members]
        boxes.append(fit_box(frame.points[sel], f_dyn[sel]).box)
    return discard_degenerate(boxes, params)


def cluster_sequence(frames, params: ClusterParams, frame_interval_s: float) -> dict[int, list[Box]]:
    return {f.timestamp_index: cluster_frame(f, params, frame_interval_s) for f in frames}
