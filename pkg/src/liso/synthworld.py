"""Deterministic synthetic lidar worlds with exact ego-motion, scene flow and boxes.

Actors are cuboid shells (five faces, no bottom) driving piecewise
constant-curvature paths. The world ground is the plane z=0 and the sensor
frame origin sits on it, so box centres are at ``h / 2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Box, PointFrame, RigidTransform, normalize_heading
from .io import BoxRecord, SequenceManifest, write_boxes, write_sequence, write_speeds

SIZE_TEMPLATES = {
    "car": (4.5, 1.9, 1.6),
    "van": (5.4, 2.1, 2.2),
    "cyclist": (1.8, 0.7, 1.7),
}

_CLUTTER_STREAM = 7_919
_ACTOR_STREAM = 104_729


@dataclass
class Segment:
    frames: int
    speed: float
    yaw_rate: float = 0.0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("segment must span at least one frame")
        if self.speed < 0 or not math.isfinite(self.speed):
            raise ValueError(f"speed must be finite and >= 0, got {self.speed}")
        if not math.isfinite(self.yaw_rate):
            raise ValueError("yaw_rate must be finite")


@dataclass
class Trajectory:
    """Start pose ``(x, y, heading)`` and constant speed/yaw-rate segments.

    Motion continues with the last segment after the listed segments run out.
    """

    start: tuple = (0.0, 0.0, 0.0)
    segments: list = field(default_factory=list)

    def pose(self, t: float, dt: float) -> tuple[float, float, float]:
        x, y, h = (float(v) for v in self.start)
        remaining = t
        segs = self.segments or [Segment(1, 0.0, 0.0)]
        for k, seg in enumerate(segs):
            dur = seg.frames * dt if k < len(segs) - 1 else math.inf
            tau = min(remaining, dur)
            x, y, h = _advance(x, y, h, seg.speed, seg.yaw_rate, tau)
            remaining -= tau
            if remaining <= 0:
                break
        return x, y, h

    def speed(self, t: float, dt: float) -> float:
        segs = self.segments or [Segment(1, 0.0, 0.0)]
        elapsed = 0.0
        for k, seg in enumerate(segs):
            dur = seg.frames * dt
            if t < elapsed + dur or k == len(segs) - 1:
                return seg.speed
            elapsed += dur
        return segs[-1].speed

    @property
    def is_static(self) -> bool:
        return all(s.speed == 0 for s in self.segments)


def _advance(x, y, h, v, w, tau):
    if tau <= 0 or v == 0:
        return x, y, h + w * tau
    if abs(w) < 1e-12:
        return x + v * tau * math.cos(h), y + v * tau * math.sin(h), h
    h1 = h + w * tau
    r = v / w
    return x + r * (math.sin(h1) - math.sin(h)), y - r * (math.cos(h1) - math.cos(h)), h1


@dataclass
class ActorSpec:
    size: tuple
    trajectory: Trajectory
    spawn: int = 0
    despawn: Optional[int] = None

    def __post_init__(self):
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ValueError(f"actor size must be three positive values, got {self.size}")

    @property
    def movable_but_static(self) -> bool:
        return self.trajectory.is_static

    def alive(self, t: int) -> bool:
        return self.spawn <= t and (self.despawn is None or t < self.despawn)


@dataclass
class WorldSpec:
    seed: int = 0
    actors: list = field(default_factory=list)
    ego: Trajectory = field(default_factory=Trajectory)
    frame_count: int = 50
    frame_interval_s: float = 0.1
    background_density: float = 0.02
    surface_density: float = 8.0
    ground_density: float = 0.05
    noise_sigma: float = 0.0
    extent_m: float = 50.0

    def validate(self) -> None:
        if self.frame_count < 1:
            raise ValueError("world needs at least one frame")
        if not self.actors and self.background_density <= 0 and self.ground_density <= 0:
            raise ValueError("world is empty")
        if self.frame_interval_s <= 0:
            raise ValueError("frame_interval_s must be positive")
        if min(self.background_density, self.surface_density, self.ground_density, self.noise_sigma) < 0:
            raise ValueError("densities and noise must be non-negative")
        if self.extent_m <= 0:
            raise ValueError("extent_m must be positive")


@dataclass
class SynthWorld:
    spec: WorldSpec
    frames: list
    gt_boxes: list
    gt_flow: list
    speeds: dict
    point_labels: list
    ego_poses: list

    def boxes_by_frame(self) -> dict[int, list[BoxRecord]]:
        out = {t: [] for t in range(len(self.frames))}
        for r in self.gt_boxes:
            out[r.frame_index].append(r)
        return out


def _pose_matrix(x, y, h, z=0.0) -> RigidTransform:
    return RigidTransform.from_yaw_translation(h, (x, y, z))


def _sample_shell(rng, size, n):
    """``n`` points uniformly on the five visible faces of a box at the origin."""
    l, w, h = size
    areas = np.array([l * w, l * h, l * h, w * h, w * h])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    pts = np.empty((n, 3))
    hl, hw, hh = 0.5 * l, 0.5 * w, 0.5 * h
    top = face == 0
    pts[top] = np.c_[(u[top] - 0.5) * l, (v[top] - 0.5) * w, np.full(top.sum(), hh)]
    for f, sign in ((1, 1.0), (2, -1.0)):
        m = face == f
        pts[m] = np.c_[(u[m] - 0.5) * l, np.full(m.sum(), sign * hw), (v[m] - 0.5) * h]
    for f, sign in ((3, 1.0), (4, -1.0)):
        m = face == f
        pts[m] = np.c_[np.full(m.sum(), sign * hl), (u[m] - 0.5) * w, (v[m] - 0.5) * h]
    return pts


def shell_points_count(size, density) -> int:
    l, w, h = size
    return int(round(density * (l * w + 2 * l * h + 2 * w * h)))


def simulate(spec: WorldSpec) -> SynthWorld:
    """Render a world into frames with exact flow and ground-truth boxes."""
    spec.validate()
    dt = spec.frame_interval_s
    n_frames = spec.frame_count
    ego_poses = [_pose_matrix(*spec.ego.pose(t * dt, dt)) for t in range(n_frames + 1)]
    ego_inv = [T.inverse() for T in ego_poses]

    clutter_world = _sample_clutter(spec, ego_poses)

    frames, gt_boxes, gt_flow, labels = [], [], [], []
    speeds = {}
    ext = spec.extent_m
    for t in range(n_frames):
        rng = np.random.default_rng([spec.seed, t])
        to_ego, to_next = ego_inv[t], ego_inv[t + 1]
        pts_list, flow_list, lab_list, ground_list = [], [], [], []

        n_ground = int(round(spec.ground_density * (2 * ext) ** 2))
        if n_ground:
            g = np.c_[rng.uniform(-ext, ext, (n_ground, 2)), np.zeros(n_ground)]
            gw = ego_poses[t].apply(g)
            pts_list.append(g)
            flow_list.append(to_next.apply(gw) - g)
            lab_list.append(np.full(n_ground, -2))
            ground_list.append(np.ones(n_ground, dtype=bool))

        if len(clutter_world):
            c = to_ego.apply(clutter_world)
            keep = np.all(np.abs(c[:, :2]) <= ext, axis=1)
            pts_list.append(c[keep])
            flow_list.append(to_next.apply(clutter_world[keep]) - c[keep])
            lab_list.append(np.full(int(keep.sum()), -1))
            ground_list.append(np.zeros(int(keep.sum()), dtype=bool))

        for aid, actor in enumerate(spec.actors):
            if not actor.alive(t):
                continue
            l, w, h = actor.size
            x, y, hd = actor.trajectory.pose(t * dt, dt)
            A_t = _pose_matrix(x, y, hd, 0.5 * h)
            A_n = _pose_matrix(*actor.trajectory.pose((t + 1) * dt, dt), 0.5 * h)
            center_ego = to_ego.apply(A_t.translation)
            if np.any(np.abs(center_ego[:2]) > ext):
                continue
            box = Box(*center_ego, l, w, h, normalize_heading(hd + to_ego.yaw), 1.0)
            gt_boxes.append(BoxRecord(t, box, track_id=aid))
            speeds[(t, aid)] = actor.trajectory.speed(t * dt, dt)
            n = shell_points_count(actor.size, spec.surface_density)
            if n == 0:
                continue
            local = _sample_shell(np.random.default_rng([spec.seed, t, _ACTOR_STREAM, aid]), actor.size, n)
            p_world = A_t.apply(local)
            p = to_ego.apply(p_world)
            f = to_next.apply(A_n.apply(local)) - p
            keep = np.all(np.abs(p[:, :2]) <= ext, axis=1)
            pts_list.append(p[keep])
            flow_list.append(f[keep])
            lab_list.append(np.full(int(keep.sum()), aid))
            ground_list.append(np.zeros(int(keep.sum()), dtype=bool))

        points = np.concatenate(pts_list) if pts_list else np.zeros((0, 3))
        flow = np.concatenate(flow_list) if flow_list else np.zeros((0, 3))
        lab = np.concatenate(lab_list) if lab_list else np.zeros(0, dtype=int)
        ground = np.concatenate(ground_list) if ground_list else np.zeros(0, dtype=bool)
        if spec.noise_sigma > 0:
            points = points + rng.normal(0.0, spec.noise_sigma, points.shape)
        pose_next = to_ego @ ego_poses[t + 1]
        frames.append(PointFrame(t, points, flow.copy(), ground, pose_next))
        gt_flow.append(flow)
        labels.append(lab)
    return SynthWorld(spec, frames, gt_boxes, gt_flow, speeds, labels, ego_poses[:n_frames])


def _sample_clutter(spec, ego_poses):
    if spec.background_density <= 0:
        return np.zeros((0, 3))
    xy = np.array([T.translation[:2] for T in ego_poses])
    lo = xy.min(axis=0) - spec.extent_m
    hi = xy.max(axis=0) + spec.extent_m
    area = float(np.prod(hi - lo))
    n = int(round(spec.background_density * area))
    rng = np.random.default_rng([spec.seed, _CLUTTER_STREAM])
    return np.c_[rng.uniform(lo, hi, (n, 2)), rng.uniform(0.3, 2.5, n)]


def perturb_flow(flow: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. Gaussian noise of std ``sigma`` to every flow component."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    flow = np.asarray(flow, dtype=np.float64)
    if sigma == 0:
        return flow.copy()
    return flow + np.random.default_rng(seed).normal(0.0, sigma, flow.shape)


def generate(spec: WorldSpec, out_dir, sequence_id: str = "synth") -> tuple[SequenceManifest, list, list]:
    """Simulate ``spec`` and write the sequence plus ``gt_boxes.txt`` / ``gt_speeds.txt``."""
    world = simulate(spec)
    out_dir = Path(out_dir)
    manifest = write_sequence(out_dir, sequence_id, world.frames, spec.frame_interval_s,
                              extra={"seed": spec.seed})
    write_boxes(world.gt_boxes, out_dir / "gt_boxes.txt")
    write_speeds(world.speeds, out_dir / "gt_speeds.txt")
    return manifest, world.gt_boxes, world.gt_flow


# --- random worlds -------------------------------------------------------


def random_world(seed: int, n_moving: int = 3, n_static: int = 2, frame_count: int = 50,
                 frame_interval_s: float = 0.1, ego_speed: Optional[float] = None,
                 templates=("car", "van", "cyclist"), min_separation: float = 8.0,
                 **kwargs) -> WorldSpec:
    """Sample a world whose actors stay separated and inside the sensor square."""
    rng = np.random.default_rng([seed, 31337])
    dt = frame_interval_s
    if ego_speed is None:
        ego_speed = float(rng.uniform(0.0, 6.0))
    ego = Trajectory((0.0, 0.0, 0.0), [Segment(frame_count, ego_speed, float(rng.uniform(-0.05, 0.05)))])
    spec = WorldSpec(seed=seed, ego=ego, frame_count=frame_count, frame_interval_s=dt, **kwargs)
    margin = spec.extent_m - 10.0
    times = np.arange(frame_count + 1) * dt
    ego_xy = np.array([ego.pose(t, dt)[:2] for t in times])
    ego_h = np.array([ego.pose(t, dt)[2] for t in times])

    def track_xy(traj):
        return np.array([traj.pose(t, dt)[:2] for t in times])

    def in_view(xy):
        d = xy - ego_xy
        c, s = np.cos(ego_h), np.sin(ego_h)
        lx = c * d[:, 0] + s * d[:, 1]
        ly = -s * d[:, 0] + c * d[:, 1]
        return np.all(np.abs(lx) <= margin) and np.all(np.abs(ly) <= margin)

    placed: list[np.ndarray] = []
    kinds = [templates[int(rng.integers(len(templates)))] for _ in range(n_moving)]
    moving_kinds = kinds or list(templates)
    kinds += [moving_kinds[int(rng.integers(len(moving_kinds)))] for _ in range(n_static)]
    for k, kind in enumerate(kinds):
        moving = k < n_moving
        base = np.array(SIZE_TEMPLATES[kind])
        size = tuple(float(v) for v in base * rng.uniform(0.92, 1.08, 3))
        for _ in range(2000):
            x0, y0 = rng.uniform(-margin, margin, 2)
            h0 = float(rng.uniform(-math.pi, math.pi))
            if moving:
                v = float(rng.uniform(3.0, 9.0)) if kind != "cyclist" else float(rng.uniform(2.0, 5.0))
                split = int(rng.integers(frame_count // 3, 2 * frame_count // 3 + 1))
                segs = [Segment(split, v, float(rng.uniform(-0.3, 0.3))),
                        Segment(frame_count - split + 1, v, float(rng.uniform(-0.3, 0.3)))]
            else:
                segs = [Segment(frame_count + 1, 0.0, 0.0)]
            traj = Trajectory((float(x0), float(y0), h0), segs)
            xy = track_xy(traj)
            if not in_view(xy):
                continue
            if any(np.min(np.linalg.norm(xy - other, axis=1)) < min_separation for other in placed):
                continue
            placed.append(xy)
            spec.actors.append(ActorSpec(size, traj))
            break
        else:
            raise RuntimeError(f"could not place actor {k} in world seed {seed}")
    return spec


# --- declarative spec files ----------------------------------------------

_SCALAR_KEYS = {
    "seed": int, "frame_count": int, "frame_interval_s": float, "background_density": float,
    "surface_density": float, "ground_density": float, "noise_sigma": float, "extent_m": float,
}


def _fmt_traj(traj: Trajectory) -> tuple[str, str]:
    start = ",".join(repr(float(v)) for v in traj.start)
    segs = ";".join(f"{s.frames}:{float(s.speed)!r}:{float(s.yaw_rate)!r}" for s in traj.segments)
    return start, segs


def _parse_traj(start: str, segs: str) -> Trajectory:
    st = tuple(float(v) for v in start.split(","))
    if len(st) != 3:
        raise ValueError(f"start must be x,y,heading: {start!r}")
    out = []
    for chunk in filter(None, (c.strip() for c in segs.split(";"))):
        parts = chunk.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"segment must be frames:speed[:yaw_rate]: {chunk!r}")
        out.append(Segment(int(parts[0]), float(parts[1]), float(parts[2]) if len(parts) == 3 else 0.0))
    return Trajectory(st, out)


def dump_world_spec(spec: WorldSpec) -> str:
    lines = [f"{k} = {getattr(spec, k)!r}" for k in _SCALAR_KEYS]
    start, segs = _fmt_traj(spec.ego)
    lines += [f"ego.start = {start}", f"ego.segments = {segs}"]
    for i, a in enumerate(spec.actors):
        start, segs = _fmt_traj(a.trajectory)
        lines += [
            f"actor.{i}.size = " + ",".join(repr(float(v)) for v in a.size),
            f"actor.{i}.start = {start}",
            f"actor.{i}.segments = {segs}",
            f"actor.{i}.spawn = {a.spawn}",
        ]
        if a.despawn is not None:
            lines.append(f"actor.{i}.despawn = {a.despawn}")
    return "\n".join(lines) + "\n"


def parse_world_spec(text: str) -> WorldSpec:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in values:
            raise ValueError(f"line {lineno}: duplicate key {k}")
        values[k] = v
    spec = WorldSpec()
    actors: dict[int, dict[str, str]] = {}
    for k, v in values.items():
        if k in _SCALAR_KEYS:
            setattr(spec, k, _SCALAR_KEYS[k](v))
        elif k in ("ego.start", "ego.segments"):
            continue
        elif k.startswith("actor."):
            parts = k.split(".")
            if len(parts) != 3 or parts[2] not in ("size", "start", "segments", "spawn", "despawn"):
                raise ValueError(f"unknown key {k}")
            actors.setdefault(int(parts[1]), {})[parts[2]] = v
        else:
            raise ValueError(f"unknown key {k}")
    spec.ego = _parse_traj(values.get("ego.start", "0,0,0"), values.get("ego.segments", ""))
    for i in sorted(actors):
        a = actors[i]
        if "size" not in a:
            raise ValueError(f"actor {i} has no size")
        spec.actors.append(ActorSpec(
            tuple(float(v) for v in a["size"].split(",")),
            _parse_traj(a.get("start", "0,0,0"), a.get("segments", "")),
            int(a.get("spawn", 0)),
            int(a["despawn"]) if "despawn" in a else None,
        ))
    spec.validate()
    return spec


def load_world_spec(path) -> WorldSpec:
    return parse_world_spec(Path(path).read_text())
