"""Log-brightness integrate-and-fire event generation and sensor-noise augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import Intrinsics
from ..geom import RigidTransform, delta_transform, matrix_to_rotvec, relative_delta, rotvec_to_matrix
from .events import EventStream
from .render import render

EVENT_WIDTH, EVENT_HEIGHT = 346, 260


def default_event_intrinsics():
    """Ideal pinhole model of a 346x260 event sensor with a ~57 deg horizontal field of view."""
    return Intrinsics(320.0, 320.0, 173.0, 130.0, EVENT_WIDTH, EVENT_HEIGHT)


@dataclass(frozen=True)
class SimConfig:
    contrast_threshold: float = 0.18
    ambient_ratio: float = 0.5
    window_ms: float = 33.0
    substeps: int = 16
    noise_count_mean: float = 200.0  # per polarity per window; sensor-specific, not measured here
    noise_count_std: float = 50.0
    eps: float = 1e-3

    def __post_init__(self):
        if not self.contrast_threshold > 0:
            raise ValueError(f"contrast threshold must be positive, got {self.contrast_threshold}")
        if self.substeps < 2:
            raise ValueError(f"need at least 2 substeps, got {self.substeps}")
        if not self.window_ms > 0:
            raise ValueError(f"window must be positive, got {self.window_ms}")

    @property
    def window_us(self):
        return int(round(self.window_ms * 1000))

    def replace(self, **changes):
        d = dict(self.__dict__)
        d.update(changes)
        return SimConfig(**d)


def integrate_and_fire(log_frames, times_us, threshold):
    """Per-pixel event emission from a sequence of log-intensity frames.

    Between consecutive frames the log intensity is linear in time. Each pixel
    keeps a reference level; whenever the signal is at least ``threshold``
    above (below) it, one positive (negative) event fires and the reference
    moves by ``threshold`` in that direction. Event times are the crossing
    times of the moved reference, rounded to microseconds.

    Returns ``(t, x, y, p)`` arrays sorted by time (stable).
    """
    L = np.asarray(log_frames, dtype=float)
    times = np.asarray(times_us, dtype=float)
    if L.ndim != 3 or len(times) != len(L):
        raise ValueError("need (n, H, W) frames with one timestamp each")
    H, W = L.shape[1:]
    ref = L[0].ravel().copy()
    out_t, out_i, out_p = [], [], []
    for k in range(1, len(L)):
        prev, cur = L[k - 1].ravel(), L[k].ravel()
        dt = times[k] - times[k - 1]
        for sign in (1, -1):
            idx = np.flatnonzero(sign * (cur - ref) >= threshold)
            while idx.size:
                ref[idx] += sign * threshold
                lp, lc = prev[idx], cur[idx]
                denom = lc - lp
                frac = np.where(denom != 0, (ref[idx] - lp) / np.where(denom != 0, denom, 1), 1.0)
                t = times[k - 1] + np.clip(frac, 0.0, 1.0) * dt
                out_t.append(np.rint(t).astype(np.int64))
                out_i.append(idx)
                out_p.append(np.full(idx.size, sign, dtype=np.int8))
                idx = idx[sign * (cur[idx] - ref[idx]) >= threshold]
    if not out_t:
        z = np.zeros(0, np.int64)
        return z, z, z, np.zeros(0, np.int8)
    t = np.concatenate(out_t)
    i = np.concatenate(out_i)
    p = np.concatenate(out_p)
    order = np.argsort(t, kind="stable")
    t, i, p = t[order], i[order], p[order]
    return t, i % W, i // W, p


def interpolate_pose(pose_start, pose_end, s, center_of_mass=(0.0, 0.0, 0.0)):
    """Pose a fraction ``s`` of the way along the constant-velocity screw about the center of mass."""
    t, R = relative_delta(pose_start, pose_end, center_of_mass)
    center = pose_start.apply(np.asarray(center_of_mass, dtype=float))
    Rs = rotvec_to_matrix(s * matrix_to_rotvec(R))
    return delta_transform(s * t, Rs, center) @ pose_start


def generate_events(scene, pose_start, pose_end, K=None, config=SimConfig(), t_start=0):
    """Events produced while the object moves from ``pose_start`` to ``pose_end`` over one window.

    ``config.substeps`` frames are rendered at evenly spaced times covering
    ``[t_start, t_start + window]``; the motion is interpolated about the
    mesh's center of mass.
    """
    K = default_event_intrinsics() if K is None else K
    n = config.substeps
    s = np.linspace(0.0, 1.0, n)
    times = t_start + s * config.window_us
    com = scene.mesh.center_of_mass
    frames = np.empty((n, K.height, K.width))
    for k in range(n):
        pose = pose_start if k == 0 else pose_end if k == n - 1 else interpolate_pose(pose_start, pose_end, s[k], com)
        frames[k] = render(scene, pose, K, config.ambient_ratio).gray
    t, x, y, p = integrate_and_fire(np.log(frames + config.eps), times, config.contrast_threshold)
    # the final instant belongs to the next window
    t = np.minimum(t, t_start + config.window_us - 1)
    return EventStream.from_arrays(t, x, y, p, K.width, K.height)


def _region_bounds(region, width, height):
    if region is None:
        return 0, width, 0, height
    if hasattr(region, "x0"):
        x0, y0, side = region.x0, region.y0, region.side
        x1, y1 = x0 + side, y0 + side
    else:
        x0, y0, x1, y1 = region
    x0, x1 = max(0, x0), min(width, x1)
    y0, y1 = max(0, y0), min(height, y1)
    if x1 <= x0 or y1 <= y0:
        raise ValueError("noise region does not overlap the sensor")
    return x0, x1, y0, y1


def add_sensor_noise(stream, rng, config=SimConfig(), region=None, t_range=None):
    """Insert ``k ~ N(mean, std)`` uniformly placed events per polarity.

    ``region`` is a crop box or ``(x0, y0, x1, y1)``; ``t_range`` is the
    half-open interval in microseconds (default ``[0, window)``).
    """
    t0, t1 = (0, config.window_us) if t_range is None else (int(t_range[0]), int(t_range[1]))
    x0, x1, y0, y1 = _region_bounds(region, stream.width, stream.height)
    parts_t, parts_x, parts_y, parts_p = [stream.t.astype(np.int64)], [stream.x], [stream.y], [stream.p]
    added = 0
    for sign in (1, -1):
        k = int(max(0, round(rng.normal(config.noise_count_mean, config.noise_count_std))))
        if k == 0:
            continue
        parts_t.append(rng.integers(t0, t1, k))
        parts_x.append(rng.integers(x0, x1, k))
        parts_y.append(rng.integers(y0, y1, k))
        parts_p.append(np.full(k, sign, np.int8))
        added += k
    if added == 0:
        return stream
    return EventStream.from_arrays(np.concatenate(parts_t), np.concatenate(parts_x),
                                   np.concatenate(parts_y), np.concatenate(parts_p),
                                   stream.width, stream.height)


def static_pose(distance, rotation=None, center_of_mass=(0.0, 0.0, 0.0)):
    """Pose placing the center of mass on the optical axis at ``distance``."""
    R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
    return RigidTransform(R, np.array([0.0, 0.0, distance]) - R @ np.asarray(center_of_mass, dtype=float))
