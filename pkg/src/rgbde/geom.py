"""SE(3) pose algebra, pose-error metrics and random pose perturbations.

Conventions
-----------
A ``RigidTransform`` maps points from a source frame into a target frame,
``x_target = R @ x_source + t``. Composition ``a @ b`` applies ``b`` first.
Translations are in meters, angles in radians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def orthonormalize(R):
    """Closest rotation matrix (Frobenius norm) to ``R``."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotvec_to_matrix(rotvec):
    """Rodrigues formula: axis * angle -> rotation matrix."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(rotvec))
    K = skew(rotvec)
    if theta < 1e-8:
        # second-order Taylor expansion keeps the result orthonormal to ~1e-24
        return np.eye(3) + K + 0.5 * K @ K
    K = K / theta
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * K @ K


def matrix_to_rotvec(R):
    """Inverse of :func:`rotvec_to_matrix`, angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * w
    if math.pi - theta > 1e-4:
        return theta / (2.0 * math.sin(theta)) * w
    # near pi: axis from the symmetric part, sign from the antisymmetric part
    B = (R + R.T) / 2.0 - cos_theta * np.eye(3)
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / math.sqrt(max(B[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return theta * axis


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_xyz_to_matrix(angles):
    """Intrinsic X-Y-Z Euler angles: ``R = Rx(a) @ Ry(b) @ Rz(c)``."""
    a, b, c = (float(v) for v in angles)
    return _rx(a) @ _ry(b) @ _rz(c)


def matrix_to_euler_xyz(R):
    R = np.asarray(R, dtype=float)
    b = math.asin(float(np.clip(R[0, 2], -1.0, 1.0)))
    if abs(R[0, 2]) < 1.0 - 1e-12:
        a = math.atan2(-R[1, 2], R[2, 2])
        c = math.atan2(-R[0, 1], R[0, 0])
    else:
        # gimbal lock: only a +/- c is observable, put it all in a
        a = math.atan2(R[2, 1], R[1, 1])
        c = 0.0
    return np.array([a, b, c])


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(rotvec_to_matrix(rotvec), translation)

    @classmethod
    def from_euler(cls, angles, translation=(0.0, 0.0, 0.0)):
        return cls(euler_xyz_to_matrix(angles), translation)

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        if isinstance(other, RigidTransform):
            return RigidTransform(self.rotation @ other.rotation,
                                  self.rotation @ other.translation + self.translation)
        return NotImplemented

    def apply(self, points):
        """Transform an (N, 3) or (3,) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def normalized(self):
        return RigidTransform(orthonormalize(self.rotation), self.translation)

    def orthonormality_error(self):
        return float(np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3)))

    def allclose(self, other, atol=1e-9):
        return (np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
                and np.allclose(self.translation, other.translation, rtol=0, atol=atol))

    def __repr__(self):
        rv = matrix_to_rotvec(self.rotation)
        return (f"RigidTransform(rotvec={np.array2string(rv, precision=6)}, "
                f"t={np.array2string(self.translation, precision=6)})")


def compose(a, b):
    """``a @ b``: apply ``b`` first, then ``a``."""
    return a @ b


def invert(a):
    return a.inverse()


def translation_error(t_star, t):
    """L2 distance between two translation vectors."""
    d = np.asarray(t_star, dtype=float) - np.asarray(t, dtype=float)
    return float(np.sqrt(d @ d))


def rotation_error(R_star, R):
    """Geodesic angle between two rotations, in radians within [0, pi]."""
    R_star = np.asarray(R_star, dtype=float)
    R = np.asarray(R, dtype=float)
    # Tr(R^T R*) without forming the product
    tr = float(np.sum(R * R_star))
    return math.acos(min(1.0, max(-1.0, (tr - 1.0) / 2.0)))


# ---------------------------------------------------------------------------
# random perturbations


@dataclass(frozen=True)
class PoseDelta:
    """A sampled relative motion: a translation and a rotation about the object center."""

    direction: np.ndarray
    translation_magnitude: float
    rotation_axis: np.ndarray
    rotation_magnitude: float

    @property
    def translation(self):
        return np.asarray(self.direction, dtype=float) * self.translation_magnitude

    @property
    def rotation(self):
        return rotvec_to_matrix(np.asarray(self.rotation_axis, dtype=float) * self.rotation_magnitude)

    def scaled(self, s):
        """The same motion carried out to fraction ``s`` (0 -> identity, 1 -> full)."""
        return PoseDelta(self.direction, s * self.translation_magnitude,
                         self.rotation_axis, s * self.rotation_magnitude)

    @classmethod
    def identity(cls):
        e = np.array([0.0, 0.0, 1.0])
        return cls(e, 0.0, e, 0.0)

    @classmethod
    def from_vectors(cls, translation, rotvec):
        translation = np.asarray(translation, dtype=float)
        rotvec = np.asarray(rotvec, dtype=float)
        tm = float(np.linalg.norm(translation))
        rm = float(np.linalg.norm(rotvec))
        e = np.array([0.0, 0.0, 1.0])
        return cls(translation / tm if tm > 0 else e, tm, rotvec / rm if rm > 0 else e, rm)


def sample_sphere_direction(rng):
    """Uniform unit vector: azimuth ``U(-180, 180)`` deg, polar ``acos(2x - 1)``.

    ``rng`` only needs a ``random()`` method returning floats in [0, 1).
    """
    theta = -math.pi + 2.0 * math.pi * rng.random()
    x = rng.random()
    phi = math.acos(2.0 * x - 1.0)
    return np.array([math.sin(phi) * math.cos(theta),
                     math.sin(phi) * math.sin(theta),
                     math.cos(phi)])


MAX_DELTA_TRANSLATION = 0.04  # m
MAX_DELTA_ROTATION = math.radians(35.0)


def sample_pose_delta(rng, max_translation=MAX_DELTA_TRANSLATION, max_rotation=MAX_DELTA_ROTATION):
    direction = sample_sphere_direction(rng)
    axis = sample_sphere_direction(rng)
    t_mag = max_translation * rng.random()
    r_mag = max_rotation * rng.random()
    return PoseDelta(direction, t_mag, axis, r_mag)


def sample_rotation(rng):
    """Uniform rotation: a uniform direction for the object z-axis plus a uniform roll."""
    z = sample_sphere_direction(rng)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    base = np.stack([x, y, z], axis=1)
    roll = -math.pi + 2.0 * math.pi * rng.random()
    return base @ _rz(roll)


def delta_transform(translation, rotation, center):
    """Rigid motion rotating by ``rotation`` about ``center`` then translating."""
    R = np.asarray(rotation, dtype=float)
    c = np.asarray(center, dtype=float)
    return RigidTransform(R, np.asarray(translation, dtype=float) + c - R @ c)


def apply_delta(delta, pose, center_of_mass=(0.0, 0.0, 0.0)):
    """Move an object at ``pose`` by ``delta``, rotating about its center of mass.

    ``center_of_mass`` is given in object coordinates.
    """
    center = pose.apply(np.asarray(center_of_mass, dtype=float))
    return delta_transform(delta.translation, delta.rotation, center) @ pose


def relative_delta(pose_from, pose_to, center_of_mass=(0.0, 0.0, 0.0)):
    """Translation and rotation (about the center of mass) taking ``pose_from`` to ``pose_to``."""
    c_from = pose_from.apply(np.asarray(center_of_mass, dtype=float))
    c_to = pose_to.apply(np.asarray(center_of_mass, dtype=float))
    R = pose_to.rotation @ pose_from.rotation.T
    return c_to - c_from, orthonormalize(R)


# ---------------------------------------------------------------------------
# pose files: one row-major 4x4 homogeneous matrix per line


def write_poses(path, poses):
    with open(path, "w") as f:
        for pose in poses:
            f.write(" ".join(repr(float(v)) for v in pose.matrix.ravel()) + "\n")


def read_poses(path):
    from .errors import FormatError

    text = Path(path).read_text()
    try:
        values = np.array(text.split(), dtype=float)
    except ValueError as exc:
        raise FormatError(str(exc), path) from None
    if values.size % 16:
        raise FormatError(f"{values.size} numbers is not a whole number of 4x4 matrices", path)
    return [RigidTransform.from_matrix(M) for M in values.reshape(-1, 4, 4)]
