"""Track regularisation: jerk-minimising centre smoothing, heading alignment, size voting."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .core import normalize_heading
from .tracker import Track

log = logging.getLogger(__name__)


@dataclass
class SmoothParams:
    beta: float = 3.0
    min_track_length_m: float = 3.0
    step_size: float = 0.1
    steps: int = 2000
    stationary_eps: float = 0.05  # m/frame
    size_percentile: float = 90.0

    def validate(self) -> None:
        if not self.beta > 0:
            raise ValueError("smooth.beta must be positive")
        if self.steps < 1:
            raise ValueError("smooth.steps must be >= 1")
        if not self.step_size > 0 or self.min_track_length_m < 0 or self.stationary_eps < 0:
            raise ValueError("smooth.step_size must be positive; lengths non-negative")
        if not 0 <= self.size_percentile <= 100:
            raise ValueError("smooth.size_percentile must be in [0, 100]")


def jerk_loss(X_smooth, X_obs, beta: float, dt: float) -> tuple[float, np.ndarray]:
    """Sum of squared fourth differences plus ``beta`` times squared residuals.

    Fourth derivatives come from repeated forward differences divided by
    ``dt``; for fewer than five samples only the residual term remains.
    Returns ``(loss, gradient w.r.t. X_smooth)``.
    """
    X = np.asarray(X_smooth, dtype=np.float64).reshape(-1, 3)
    O = np.asarray(X_obs, dtype=np.float64).reshape(-1, 3)
    if X.shape != O.shape:
        raise ValueError("X_smooth and X_obs must have the same shape")
    losses, grad = kernels.jerk_loss_grad(X[None], O[None], np.array([len(X)]), beta, dt)
    return float(losses[0]), grad[0]


class Adam:
    """Adam over one parameter array; moment estimates are elementwise."""

    def __init__(self, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimize_positions(obs_list, params: SmoothParams, dt: float) -> tuple[list, list]:
    """Minimise the jerk objective for a batch of tracks at once.

    Every track starts at its observations and keeps its own best iterate, so
    the result equals optimising each track alone. Returns ``(positions,
    loss histories)``; a track whose loss turns non-finite gets its input back.
    """
    n = len(obs_list)
    if n == 0:
        return [], []
    lengths = np.array([len(o) for o in obs_list], dtype=np.int64)
    tmax = int(lengths.max())
    O = np.zeros((n, tmax, 3))
    for k, o in enumerate(obs_list):
        O[k, :lengths[k]] = o
    X = O.copy()
    best_X = O.copy()
    best_loss = np.full(n, np.inf)
    failed = np.zeros(n, dtype=bool)
    history = np.empty((params.steps + 1, n))
    opt = Adam(lr=params.step_size)
    for it in range(params.steps + 1):
        losses, grad = kernels.jerk_loss_grad(X, O, lengths, params.beta, dt)
        history[it] = losses
        bad = ~np.isfinite(losses) | ~np.all(np.isfinite(grad), axis=(1, 2))
        failed |= bad
        better = (losses < best_loss) & ~failed
        best_loss[better] = losses[better]
        best_X[better] = X[better]
        if it == params.steps:
            break
        grad[failed] = 0.0
        opt.step(X, grad)
    out = []
    for k in range(n):
        if failed[k]:
            log.warning("track %d: non-finite smoothing loss, keeping observations (losses %s)",
                        k, history[:, k][~np.isfinite(history[:, k])][:3])
            out.append(O[k, :lengths[k]].copy())
        else:
            out.append(best_X[k, :lengths[k]].copy())
    return out, [history[:, k] for k in range(n)]


def path_length(centers: np.ndarray) -> float:
    if len(centers) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(centers, axis=0), axis=1)))


def _with_centers(track: Track, centers: np.ndarray) -> Track:
    entries = [replace(e, box=replace(e.box, x=c[0], y=c[1], z=c[2])) for e, c in zip(track.entries, centers)]
    return Track(track.track_id, entries)


def smooth_tracks(tracks: list[Track], params: SmoothParams, dt: float) -> list[Track]:
    """Smooth the centres of every track longer than ``min_track_length_m`` (batched)."""
    todo = [k for k, tr in enumerate(tracks) if path_length(tr.centers()) > params.min_track_length_m]
    smoothed, _ = optimize_positions([tracks[k].centers() for k in todo], params, dt)
    out = list(tracks)
    for k, X in zip(todo, smoothed):
        out[k] = _with_centers(tracks[k], X)
    return out


def smooth_track(track: Track, params: SmoothParams, dt: float) -> Track:
    return smooth_tracks([track], params, dt)[0]


def align_headings(track: Track, stationary_eps: float = 0.05) -> Track:
    """Point every box along the local tangent of the track's centres.

    Central differences inside, one-sided at the ends; where the tangent is
    shorter than ``stationary_eps`` (m/frame) the previous heading is kept.
    """
    C = track.centers()
    n = len(C)
    if n < 2:
        return track
    tangent = np.empty((n, 2))
    tangent[1:-1] = 0.5 * (C[2:, :2] - C[:-2, :2])
    tangent[0] = C[1, :2] - C[0, :2]
    tangent[-1] = C[-1, :2] - C[-2, :2]
    entries = []
    for e, tg in zip(track.entries, tangent):
        if np.hypot(*tg) < stationary_eps:
            entries.append(e)
        else:
            entries.append(replace(e, box=replace(e.box, heading=normalize_heading(math.atan2(tg[1], tg[0])))))
    return Track(track.track_id, entries)


def vote_size(track: Track, percentile: float = 90.0) -> Track:
    """Set l, w, h of every entry to the percentile of the observed entries."""
    obs = np.array([[e.box.l, e.box.w, e.box.h] for e in track.entries if e.observed]).reshape(-1, 3)
    if len(obs) == 0:
        return track
    l, w, h = np.percentile(obs, percentile, axis=0, method="linear")
    entries = [replace(e, box=replace(e.box, l=float(l), w=float(w), h=float(h))) for e in track.entries]
    return Track(track.track_id, entries)


def optimize_tracks(tracks: list[Track], params: SmoothParams, dt: float) -> list[Track]:
    """Smooth, then realign headings, then vote sizes."""
    tracks = smooth_tracks(tracks, params, dt)
    return [vote_size(align_headings(t, params.stationary_eps), params.size_percentile) for t in tracks]
