"""Camera models, lens distortion, depth correction and RGB-D / event pairing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import FormatError, InsufficientPulses, NoConvergence, NonPositiveDepth
from .geom import RigidTransform


@dataclass(frozen=True, eq=False)
class Intrinsics:
    """Pinhole camera with the 8-coefficient rational distortion model.

    ``radial`` holds k1..k6 (numerator k1..k3, denominator k4..k6) and
    ``tangential`` holds p1, p2, both applied in normalized coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    radial: np.ndarray = field(default_factory=lambda: np.zeros(6))
    tangential: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        radial = np.zeros(6)
        r = np.asarray(self.radial, dtype=float).ravel()
        radial[: r.size] = r
        tangential = np.asarray(self.tangential, dtype=float).reshape(2)
        object.__setattr__(self, "radial", radial)
        object.__setattr__(self, "tangential", tangential)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside "
                             f"{self.width}x{self.height} sensor")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def distortion(self):
        """All 8 coefficients in (k1..k6, p1, p2) order."""
        return np.concatenate([self.radial, self.tangential])

    @property
    def has_distortion(self):
        return bool(np.any(self.radial) or np.any(self.tangential))

    def replace(self, **changes):
        fields = dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width,
                      height=self.height, radial=self.radial, tangential=self.tangential)
        fields.update(changes)
        return Intrinsics(**fields)

    def undistorted(self):
        return self.replace(radial=np.zeros(6), tangential=np.zeros(2))

    def scaled(self, sx, sy=None):
        """Intrinsics of the same camera resampled by (sx, sy)."""
        sy = sx if sy is None else sy
        return self.replace(fx=self.fx * sx, fy=self.fy * sy,
                            cx=(self.cx + 0.5) * sx - 0.5, cy=(self.cy + 0.5) * sy - 0.5,
                            width=int(round(self.width * sx)), height=int(round(self.height * sy)))

    def to_dict(self):
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width,
                    height=self.height, radial=self.radial.tolist(),
                    tangential=self.tangential.tolist())

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), d.get("radial", np.zeros(6)),
                   d.get("tangential", np.zeros(2)))


def distort_normalized(xy, coeffs):
    """Apply the rational + tangential model to normalized coordinates (N, 2)."""
    xy = np.asarray(xy, dtype=float)
    k1, k2, k3, k4, k5, k6, p1, p2 = coeffs
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = (1 + r2 * (k1 + r2 * (k2 + r2 * k3))) / (1 + r2 * (k4 + r2 * (k5 + r2 * k6)))
    xd = x * radial + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
    yd = y * radial + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def _distortion_jacobian(xy, coeffs):
    k1, k2, k3, k4, k5, k6, p1, p2 = coeffs
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    num = 1 + r2 * (k1 + r2 * (k2 + r2 * k3))
    den = 1 + r2 * (k4 + r2 * (k5 + r2 * k6))
    dnum = k1 + r2 * (2 * k2 + 3 * k3 * r2)
    dden = k4 + r2 * (2 * k5 + 3 * k6 * r2)
    f = num / den
    f_r = (dnum * den - num * dden) / (den * den)
    J = np.empty(xy.shape + (2,))
    J[..., 0, 0] = f + 2 * x * x * f_r + 2 * p1 * y + 6 * p2 * x
    J[..., 0, 1] = 2 * x * y * f_r + 2 * p1 * x + 2 * p2 * y
    J[..., 1, 0] = 2 * x * y * f_r + 2 * p1 * x + 2 * p2 * y
    J[..., 1, 1] = f + 2 * y * y * f_r + 6 * p1 * y + 2 * p2 * x
    return J


def normalized_to_pixels(xy, K):
    xy = np.asarray(xy, dtype=float)
    d = distort_normalized(xy, K.distortion) if K.has_distortion else xy
    return np.stack([K.fx * d[..., 0] + K.cx, K.fy * d[..., 1] + K.cy], axis=-1)


def project(points, K):
    """Project camera-frame points (meters, (N, 3) or (3,)) to pixels."""
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("cannot project a point with z <= 0")
    xy = points[..., :2] / z[..., None]
    return normalized_to_pixels(xy, K)


def undistort(pixels, K, max_iter=50, tol=1e-14):
    """Normalized coordinates whose distorted projection is ``pixels``.

    Newton iteration on the distortion model, vectorized over points.
    """
    pixels = np.asarray(pixels, dtype=float)
    target = np.stack([(pixels[..., 0] - K.cx) / K.fx, (pixels[..., 1] - K.cy) / K.fy], axis=-1)
    if not K.has_distortion:
        return target
    coeffs = K.distortion
    xy = target.copy()
    for _ in range(max_iter):
        r = distort_normalized(xy, coeffs) - target
        if np.all(np.abs(r) <= tol):
            return xy
        J = _distortion_jacobian(xy, coeffs)
        xy = xy - np.linalg.solve(J, r[..., None])[..., 0]
    r = distort_normalized(xy, coeffs) - target
    if not np.all(np.abs(r) <= 1e-10):
        raise NoConvergence(f"undistortion did not converge in {max_iter} iterations "
                            f"(max residual {np.max(np.abs(r)):.3g})")
    return xy


def backproject(pixels, z_mm, K):
    """Camera-frame point (meters) seen at ``pixels`` with optical-axis depth ``z_mm``."""
    z = np.asarray(z_mm, dtype=float) / 1000.0
    if np.any(z <= 0):
        raise NonPositiveDepth("cannot back-project with depth <= 0")
    xy = undistort(pixels, K)
    return np.concatenate([xy * z[..., None], z[..., None] * np.ones(xy.shape[:-1] + (1,))], axis=-1)


# ---------------------------------------------------------------------------
# depth correction


@dataclass(frozen=True)
class DepthCorrection:
    """Depth error model ``e(z) = a z^2 + b z + c`` with z and e in millimeters."""

    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    rms: float = float("nan")

    @property
    def coeffs(self):
        return np.array([self.a, self.b, self.c])

    def error(self, z_mm):
        z = np.asarray(z_mm, dtype=float)
        return (self.a * z + self.b) * z + self.c


def correct_depth(z_raw, correction):
    z = np.asarray(z_raw, dtype=float)
    out = z - correction.error(z)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# temporal synchronization


def _exact(value):
    if isinstance(value, (int, Fraction)):
        return Fraction(value)
    # shortest round-trip decimal string, so 0.1 means one tenth
    return Fraction(repr(float(value)))


def temporal_offset(t0, fps):
    """Pulse offset ``floor(t0 * fps)`` between the first RGB-D frame and the event pulses.

    The product is evaluated exactly on the decimal values of the inputs, so
    boundary cases such as ``0.1 s * 30`` give 3 rather than a rounding artifact.
    """
    if t0 < 0 or fps <= 0:
        raise ValueError(f"need t0 >= 0 and fps > 0, got {t0}, {fps}")
    return math.floor(_exact(t0) * _exact(fps))


@dataclass(frozen=True)
class RGBDEFramePair:
    rgbd_index: int
    pulse_index: int
    event_window: tuple  # [t_start, t_end) in microseconds
    events: object = None


def pair_frames(rgbd_timestamps, event_pulse_timestamps, fps, events=None):
    """Pair RGB-D frame ``i`` with event frame ``i + delta``.

    Event frame ``j`` spans the trailing interval ``[pulse[j-1], pulse[j])``
    (one nominal period before the first pulse for ``j = 0``), so windows are
    contiguous and each covers the motion leading up to its frame.
    """
    rgbd = np.asarray(rgbd_timestamps, dtype=float)
    pulses = np.asarray(event_pulse_timestamps, dtype=np.int64)
    if np.any(np.diff(rgbd) <= 0) or np.any(np.diff(pulses) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    if len(rgbd) == 0:
        return []
    delta = temporal_offset(float(rgbd[0]), fps)
    last = len(rgbd) - 1 + delta
    if last >= len(pulses):
        raise InsufficientPulses(f"frame {len(rgbd) - 1} needs pulse {last}, "
                                 f"only {len(pulses)} recorded")
    period = int(round(1e6 / fps))
    pairs = []
    for i in range(len(rgbd)):
        j = i + delta
        start = int(pulses[j - 1]) if j > 0 else int(pulses[0]) - period
        end = int(pulses[j])
        sl = events.slice_time(start, end) if events is not None else None
        pairs.append(RGBDEFramePair(i, j, (start, end), sl))
    return pairs


# ---------------------------------------------------------------------------
# rig file


@dataclass
class Rig:
    """Calibrated three-camera rig (RGB, depth, event)."""

    rgb: Intrinsics
    depth: Intrinsics
    event: Intrinsics
    T_rgb_depth: RigidTransform
    T_event_depth: RigidTransform
    depth_correction: DepthCorrection = field(default_factory=DepthCorrection)

    @property
    def T_rgb_event(self):
        return self.T_event_depth.inverse() @ self.T_rgb_depth

    @property
    def T_event_rgb(self):
        return self.T_rgb_event.inverse()


RIG_SCHEMA_VERSION = 1


def save_rig(path, rig):
    doc = {
        "schema_version": RIG_SCHEMA_VERSION,
        "RGB": rig.rgb.to_dict(),
        "DEPTH": rig.depth.to_dict(),
        "EVENT": rig.event.to_dict(),
        "EXTRINSICS": {
            "T_rgb_depth": rig.T_rgb_depth.matrix.tolist(),
            "T_event_depth": rig.T_event_depth.matrix.tolist(),
            "T_rgb_event": rig.T_rgb_event.matrix.tolist(),
        },
        "DEPTH_CORRECTION": {"a": rig.depth_correction.a, "b": rig.depth_correction.b,
                             "c": rig.depth_correction.c,
                             "rms": None if math.isnan(rig.depth_correction.rms)
                             else rig.depth_correction.rms},
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_rig(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, path, exc.lineno) from None
    try:
        ext = doc["EXTRINSICS"]
        dc = doc.get("DEPTH_CORRECTION", {})
        rms = dc.get("rms")
        return Rig(
            rgb=Intrinsics.from_dict(doc["RGB"]),
            depth=Intrinsics.from_dict(doc["DEPTH"]),
            event=Intrinsics.from_dict(doc["EVENT"]),
            T_rgb_depth=RigidTransform.from_matrix(ext["T_rgb_depth"]),
            T_event_depth=RigidTransform.from_matrix(ext["T_event_depth"]),
            depth_correction=DepthCorrection(dc.get("a", 0.0), dc.get("b", 0.0), dc.get("c", 0.0),
                                             float("nan") if rms is None else rms),
        )
    except KeyError as exc:
        raise FormatError(f"missing section {exc}", path) from None
