"""On-disk formats for sequences and box/track records.

Sequence layout::

    <seq>/manifest              key=value text
    <seq>/points/%06d.bin       little-endian float32 xyz triplets
    <seq>/flow/%06d.bin         little-endian float32 dx,dy,dz (m per frame interval)
    <seq>/ground/%06d.bin       one uint8 (0/1) per point
    <seq>/poses/%06d.txt        16 decimals, row-major pose of frame t+1 in frame t

Box files are line-delimited text with a fixed two-line header; see
:func:`write_boxes`.

Dataset adapters convert external datasets into this layout offline. They must
move box z to the box centre, express flow in the ego frame of the first
frame of each pair, and put the ego pose of t+1 (in frame t) into ``poses/``.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Box, PointFrame, RigidTransform

POINT_DTYPE = np.dtype("<f4")
MANIFEST_NAME = "manifest"


class FormatError(ValueError):
    """Base class for malformed input files."""


class MissingFileError(FormatError, FileNotFoundError):
    pass


class LengthMismatchError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class BoxFileError(FormatError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass
class SequenceManifest:
    root: Path
    sequence_id: str
    frame_count: int
    frame_interval_s: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.frame_count < 0:
            raise FormatError("frame_count must be non-negative")
        if not self.frame_interval_s > 0:
            raise FormatError("frame_interval_s must be positive")

    def points_path(self, t: int) -> Path:
        return self.root / "points" / f"{t:06d}.bin"

    def flow_path(self, t: int) -> Path:
        return self.root / "flow" / f"{t:06d}.bin"

    def ground_path(self, t: int) -> Path:
        return self.root / "ground" / f"{t:06d}.bin"

    def pose_path(self, t: int) -> Path:
        return self.root / "poses" / f"{t:06d}.txt"


def write_manifest(manifest: SequenceManifest) -> Path:
    manifest.root.mkdir(parents=True, exist_ok=True)
    lines = [
        f"sequence_id={manifest.sequence_id}",
        f"frame_count={manifest.frame_count}",
        f"frame_interval_s={manifest.frame_interval_s!r}",
    ]
    lines += [f"{k}={v}" for k, v in sorted(manifest.extra.items())]
    path = manifest.root / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(seq_dir) -> SequenceManifest:
    seq_dir = Path(seq_dir)
    path = seq_dir / MANIFEST_NAME
    if not path.exists():
        raise MissingFileError(f"no manifest in {seq_dir}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    try:
        manifest = SequenceManifest(
            root=seq_dir,
            sequence_id=values.pop("sequence_id"),
            frame_count=int(values.pop("frame_count")),
            frame_interval_s=float(values.pop("frame_interval_s")),
            extra=values,
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing key {exc}") from None
    for t in range(manifest.frame_count):
        if not manifest.points_path(t).exists():
            raise MissingFileError(f"missing points file {manifest.points_path(t)}")
    return manifest


def _write_xyz(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(arr, dtype=POINT_DTYPE).reshape(-1, 3).tofile(path)


def _read_xyz(path: Path, what: str) -> np.ndarray:
    raw = np.fromfile(path, dtype=POINT_DTYPE)
    if raw.size % 3:
        raise LengthMismatchError(f"{path}: {raw.size} floats is not a multiple of 3")
    arr = raw.reshape(-1, 3).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{path}: non-finite {what} values")
    return arr


def write_pose(path: Path, T: RigidTransform) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(" ".join(f"{v!r}" for v in T.matrix.reshape(-1).tolist()) + "\n")


def read_pose(path: Path) -> RigidTransform:
    tokens = path.read_text().split()
    if len(tokens) != 16:
        raise LengthMismatchError(f"{path}: expected 16 values, got {len(tokens)}")
    try:
        vals = np.array([float(v) for v in tokens])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(vals)):
        raise NonFiniteError(f"{path}: non-finite pose")
    try:
        return RigidTransform(vals.reshape(4, 4))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_frame(manifest: SequenceManifest, frame: PointFrame) -> None:
    t = frame.timestamp_index
    _write_xyz(manifest.points_path(t), frame.points)
    if frame.flow is not None:
        _write_xyz(manifest.flow_path(t), frame.flow)
    if frame.ground_mask is not None:
        path = manifest.ground_path(t)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.ground_mask.astype(np.uint8).tofile(path)
    if frame.pose_to_next is not None:
        write_pose(manifest.pose_path(t), frame.pose_to_next)


def read_frame(manifest: SequenceManifest, t: int) -> PointFrame:
    if not 0 <= t < manifest.frame_count:
        raise IndexError(f"frame {t} outside [0, {manifest.frame_count})")
    ppath = manifest.points_path(t)
    if not ppath.exists():
        raise MissingFileError(f"missing points file {ppath}")
    points = _read_xyz(ppath, "point")
    n = len(points)
    flow = None
    if manifest.flow_path(t).exists():
        flow = _read_xyz(manifest.flow_path(t), "flow")
        if len(flow) != n:
            raise LengthMismatchError(f"{manifest.flow_path(t)}: {len(flow)} flow rows for {n} points")
    ground = None
    if manifest.ground_path(t).exists():
        raw = np.fromfile(manifest.ground_path(t), dtype=np.uint8)
        if len(raw) != n:
            raise LengthMismatchError(f"{manifest.ground_path(t)}: {len(raw)} entries for {n} points")
        if np.any(raw > 1):
            raise FormatError(f"{manifest.ground_path(t)}: ground mask values must be 0 or 1")
        ground = raw.astype(bool)
    pose = read_pose(manifest.pose_path(t)) if manifest.pose_path(t).exists() else None
    return PointFrame(t, points, flow, ground, pose)


def read_sequence(manifest: SequenceManifest) -> list[PointFrame]:
    return [read_frame(manifest, t) for t in range(manifest.frame_count)]


def write_sequence(root, sequence_id: str, frames, frame_interval_s: float, extra=None) -> SequenceManifest:
    manifest = SequenceManifest(Path(root), sequence_id, len(frames), frame_interval_s, dict(extra or {}))
    for expected, frame in enumerate(frames):
        if frame.timestamp_index != expected:
            raise FormatError("frames must be indexed 0..n-1 to be written as a sequence")
        write_frame(manifest, frame)
    write_manifest(manifest)
    return manifest


def find_sequences(root) -> list[Path]:
    """A sequence dir itself, or every immediate subdirectory holding a manifest."""
    root = Path(root)
    if (root / MANIFEST_NAME).exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / MANIFEST_NAME).exists())


# --- box records -----------------------------------------------------------

BOX_COLUMNS = ("frame_index", "track_id", "x", "y", "z", "l", "w", "h", "heading",
               "confidence", "is_pseudo", "observed")
BOX_MAGIC = "# liso-boxes v1"


@dataclass(frozen=True)
class BoxRecord:
    frame_index: int
    box: Box
    track_id: Optional[int] = None
    is_pseudo: bool = False
    observed: bool = True

    def sort_key(self):
        return (self.frame_index, -1 if self.track_id is None else self.track_id)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_boxes(records, path, coords: str = "ego") -> None:
    """Write records sorted by ``(frame_index, track_id)``.

    ``coords`` names the frame the boxes live in: ``ego`` (per-frame sensor
    frame) or ``world`` (frame-0 sensor frame, used for tracks).
    """
    if coords not in ("ego", "world"):
        raise ValueError(f"unknown coords {coords!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{BOX_MAGIC} coords={coords}", "# " + " ".join(BOX_COLUMNS)]
    for r in sorted(records, key=BoxRecord.sort_key):
        b = r.box
        lines.append(" ".join([
            str(int(r.frame_index)),
            "-" if r.track_id is None else str(int(r.track_id)),
            _fmt(b.x), _fmt(b.y), _fmt(b.z), _fmt(b.l), _fmt(b.w), _fmt(b.h),
            _fmt(b.heading), _fmt(b.confidence),
            "1" if r.is_pseudo else "0",
            "1" if r.observed else "0",
        ]))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def box_file_coords(path) -> str:
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith(BOX_MAGIC):
        raise BoxFileError(path, 1, "missing box file header")
    for tok in first.split():
        if tok.startswith("coords="):
            return tok.split("=", 1)[1]
    return "ego"


def _parse_flag(tok, path, lineno, name):
    if tok not in ("0", "1"):
        raise BoxFileError(path, lineno, f"{name} must be 0 or 1, got {tok!r}")
    return tok == "1"


def read_boxes(path) -> list[BoxRecord]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing box file {path}")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(BOX_MAGIC):
        raise BoxFileError(path, 1, "missing box file header")
    if len(lines) < 2 or lines[1].split()[1:] != list(BOX_COLUMNS):
        raise BoxFileError(path, 2, "unexpected column header")
    records = []
    for lineno, line in enumerate(lines[2:], 3):
        if not line.strip():
            raise BoxFileError(path, lineno, "blank line")
        tok = line.split()
        if len(tok) != len(BOX_COLUMNS):
            raise BoxFileError(path, lineno, f"expected {len(BOX_COLUMNS)} fields, got {len(tok)}")
        try:
            frame = int(tok[0])
            track = None if tok[1] == "-" else int(tok[1])
            vals = [float(v) for v in tok[2:10]]
        except ValueError as exc:
            raise BoxFileError(path, lineno, str(exc)) from None
        if not all(math.isfinite(v) for v in vals):
            raise BoxFileError(path, lineno, "non-finite value")
        try:
            box = Box(*vals)
        except ValueError as exc:
            raise BoxFileError(path, lineno, str(exc)) from None
        records.append(BoxRecord(
            frame, box, track,
            _parse_flag(tok[10], path, lineno, "is_pseudo"),
            _parse_flag(tok[11], path, lineno, "observed"),
        ))
    return records


def group_by_frame(records, frame_count: Optional[int] = None) -> dict[int, list[BoxRecord]]:
    out: dict[int, list[BoxRecord]] = {}
    if frame_count is not None:
        out = {t: [] for t in range(frame_count)}
    for r in records:
        out.setdefault(r.frame_index, []).append(r)
    return out


def write_speeds(speeds: dict, path) -> None:
    """Ground-truth speeds keyed by ``(frame_index, track_id)``, m/s."""
    path = Path(path)
    lines = ["# frame_index track_id speed_mps"]
    for (t, tid), v in sorted(speeds.items()):
        lines.append(f"{t} {tid} {float(v)!r}")
    path.write_text("\n".join(lines) + "\n")


def read_speeds(path) -> dict:
    speeds = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        if len(tok) != 3:
            raise BoxFileError(path, lineno, "expected 3 fields")
        speeds[(int(tok[0]), int(tok[1]))] = float(tok[2])
    return speeds
