"""Rig calibration: intrinsics from checkerboards, extrinsics by PnP, depth-error fit."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import DepthCorrection, Intrinsics, Rig, backproject, correct_depth, project, undistort
from .errors import (DegenerateConfiguration, FormatError, IllConditioned, NoConvergence,
                     RankDeficient)
from .geom import RigidTransform, matrix_to_rotvec, orthonormalize, rotvec_to_matrix

log = logging.getLogger(__name__)

CAMERAS = ("RGB", "DEPTH", "EVENT")


@dataclass(frozen=True)
class BoardSpec:
    rows: int  # inner corners
    cols: int
    square: float  # m

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2 or not self.square > 0:
            raise ValueError(f"invalid board {self}")

    @property
    def object_points(self):
        """Inner-corner coordinates on the board plane (z = 0), row-major, meters."""
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        pts = np.stack([c.ravel() * self.square, r.ravel() * self.square,
                        np.zeros(self.rows * self.cols)], axis=1)
        return pts


DEFAULT_BOARD = BoardSpec(9, 14, 0.054)


@dataclass
class CheckerboardObservation:
    board: BoardSpec
    image_points: np.ndarray
    camera_id: str
    image_id: int = 0
    depth_mm: np.ndarray | None = None  # raw depth at each corner (DEPTH camera only)

    def __post_init__(self):
        self.image_points = np.asarray(self.image_points, dtype=float).reshape(-1, 2)
        if len(self.image_points) != self.board.rows * self.board.cols:
            raise ValueError(f"{len(self.image_points)} corners for a "
                             f"{self.board.rows}x{self.board.cols} board")
        if self.camera_id not in CAMERAS:
            raise ValueError(f"unknown camera {self.camera_id!r}")
        if self.depth_mm is not None:
            self.depth_mm = np.asarray(self.depth_mm, dtype=float).reshape(-1)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    cost_trace: list
    iterations: int
    converged: bool


def levenberg_marquardt(residual, x0, jacobian, max_iter=100, lam0=1e-3, ftol=1e-10):
    """Minimize ``||residual(x)||^2`` with Marquardt-scaled damping.

    Damping starts at ``lam0``, is multiplied by 10 after a rejected step and
    divided by 10 after an accepted one. Stops when an accepted step changes
    the cost by less than ``ftol`` relatively. The returned iterate is always
    the best one seen; ``converged`` is False only if ``max_iter`` ran out.
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    cost = float(r @ r)
    trace = [cost]
    lam = lam0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if cost == 0.0:
            converged = True
            break
        J = jacobian(x)
        g = J.T @ r
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), 1e-300))
        while True:
            try:
                dx = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                dx = None
            if dx is not None:
                x_new = x + dx
                r_new = residual(x_new)
                cost_new = float(r_new @ r_new)
                if np.isfinite(cost_new) and cost_new < cost:
                    break
            lam *= 10.0
            if lam > 1e16:
                # no descent direction left: we are at a (numerical) minimum
                return LMResult(x, cost, trace, it, True)
        rel = (cost - cost_new) / cost
        x, r, cost = x_new, r_new, cost_new
        trace.append(cost)
        lam = max(lam / 10.0, 1e-15)
        if rel < ftol:
            converged = True
            break
    return LMResult(x, cost, trace, it, converged)


def _rodrigues_batch(rv):
    rv = np.asarray(rv, dtype=float)
    theta = np.linalg.norm(rv, axis=-1)
    safe = np.where(theta < 1e-12, 1.0, theta)
    k = rv / safe[..., None]
    K = np.zeros(rv.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    s = np.sin(theta)[..., None, None]
    c = (1 - np.cos(theta))[..., None, None]
    R = np.eye(3) + s * K + c * (K @ K)
    small = theta < 1e-12
    if np.any(small):
        R[small] = np.eye(3)
    return R


def _project_params(points, k):
    """Pixels of camera-frame points under intrinsic vector k = (fx, fy, cx, cy, k1..k6, p1, p2)."""
    from .camera import distort_normalized

    xy = points[:, :2] / points[:, 2:3]
    d = distort_normalized(xy, k[4:12])
    return np.stack([k[0] * d[:, 0] + k[2], k[1] * d[:, 1] + k[3]], axis=1)


def _intrinsic_vector(K):
    return np.concatenate([[K.fx, K.fy, K.cx, K.cy], K.distortion])


# ---------------------------------------------------------------------------
# homographies and Zhang's closed form


def _hartley(points):
    points = np.asarray(points, dtype=float)
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return T


def _check_not_collinear(points, what):
    c = np.asarray(points, dtype=float)
    c = c - c.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[0] == 0 or s[1] / s[0] < 1e-9:
        raise DegenerateConfiguration(f"{what} are collinear")
    return s


def estimate_homography(world_xy, image):
    """Normalized DLT homography mapping plane coordinates to pixels (H[2, 2] = 1)."""
    world_xy = np.asarray(world_xy, dtype=float)[:, :2]
    image = np.asarray(image, dtype=float)
    if len(world_xy) < 4 or len(world_xy) != len(image):
        raise DegenerateConfiguration("need at least 4 matching correspondences")
    _check_not_collinear(world_xy, "plane points")
    _check_not_collinear(image, "image points")
    Tw, Ti = _hartley(world_xy), _hartley(image)
    w = world_xy @ Tw[:2, :2].T + Tw[:2, 2]
    m = image @ Ti[:2, :2].T + Ti[:2, 2]
    n = len(w)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2], A[0::2, 2] = w, 1
    A[0::2, 6:8], A[0::2, 8] = -m[:, :1] * w, -m[:, 0]
    A[1::2, 3:5], A[1::2, 5] = w, 1
    A[1::2, 6:8], A[1::2, 8] = -m[:, 1:] * w, -m[:, 1]
    _, s, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Ti) @ Hn @ Tw
    return H / H[2, 2]


def apply_homography(H, xy):
    xy = np.asarray(xy, dtype=float)
    p = xy[:, :2] @ H[:, :2].T + H[:, 2]
    return p[:, :2] / p[:, 2:3]


def _v(H, i, j):
    hi, hj = H[:, i], H[:, j]
    return np.array([hi[0] * hj[0], hi[0] * hj[1] + hi[1] * hj[0], hi[1] * hj[1],
                     hi[2] * hj[0] + hi[0] * hj[2], hi[2] * hj[1] + hi[1] * hj[2], hi[2] * hj[2]])


def zhang_intrinsics(homographies, width, height, max_condition=1e12):
    """Closed-form focal lengths and principal point from >= 3 board homographies.

    Homographies are preconditioned by an image-size normalization so the
    condition-number test measures the geometry, not the pixel units.
    Skew is estimated by the linear system but discarded.
    """
    if len(homographies) < 3:
        raise IllConditioned(f"{len(homographies)} views cannot determine the intrinsics (need 3)")
    s = 2.0 / max(width, height)
    N = np.array([[s, 0, -s * width / 2], [0, s, -s * height / 2], [0, 0, 1.0]])
    rows = []
    for H in homographies:
        Hn = N @ np.asarray(H, dtype=float)
        Hn = Hn / np.linalg.norm(Hn)
        rows.append(_v(Hn, 0, 1))
        rows.append(_v(Hn, 0, 0) - _v(Hn, 1, 1))
    V = np.array(rows)
    _, sv, Vt = np.linalg.svd(V)
    sv = np.concatenate([sv, np.zeros(6 - len(sv))])
    cond = sv[0] / sv[4] if sv[4] > 0 else math.inf
    if cond > max_condition:
        raise IllConditioned(f"Zhang system condition number {cond:.3g} exceeds {max_condition:.0e}")
    B11, B12, B22, B13, B23, B33 = Vt[-1]
    if B11 < 0:
        B11, B12, B22, B13, B23, B33 = -B11, -B12, -B22, -B13, -B23, -B33
    den = B11 * B22 - B12 ** 2
    v0 = (B12 * B13 - B11 * B23) / den
    lam = B33 - (B13 ** 2 + v0 * (B12 * B13 - B11 * B23)) / B11
    if lam / B11 <= 0 or lam * B11 / den <= 0:
        raise IllConditioned("homographies are inconsistent with a real camera")
    alpha = math.sqrt(lam / B11)
    beta = math.sqrt(lam * B11 / den)
    gamma = -B12 * alpha ** 2 * beta / lam
    u0 = gamma * v0 / beta - B13 * alpha ** 2 / lam
    # undo the normalization: K = N^-1 K'
    fx, fy = alpha / s, beta / s
    cx, cy = u0 / s + width / 2, v0 / s + height / 2
    return Intrinsics(fx, fy, cx, cy, width, height)


def _pose_from_homography(H_norm):
    """Board pose from a homography mapping plane xy to normalized image coordinates."""
    h1, h2, h3 = H_norm[:, 0], H_norm[:, 1], H_norm[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0:
        lam = -lam
    r1, r2, t = lam * h1, lam * h2, lam * h3
    R = orthonormalize(np.stack([r1, r2, np.cross(r1, r2)], axis=1))
    return RigidTransform(R, t)


# ---------------------------------------------------------------------------
# PnP


def _jacobian_pose(fun, x, h=1e-7):
    r0 = fun(x)
    J = np.empty((r0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (fun(x + e) - fun(x - e)) / (2 * h)
    return J


def _dlt_pose(object_points, xy):
    Tn = np.eye(4)
    c = object_points.mean(axis=0)
    d = np.sqrt(((object_points - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(3) / d
    Tn[:3, :3] *= s
    Tn[:3, 3] = -s * c
    X = np.c_[(object_points - c) * s, np.ones(len(object_points))]
    n = len(X)
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -xy[:, :1] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -xy[:, 1:] * X
    _, _, Vt = np.linalg.svd(A)
    P = Vt[-1].reshape(3, 4) @ Tn
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P, M = -P, -M
    U, S, Wt = np.linalg.svd(M)
    R = U @ Wt
    t = P[:, 3] / S.mean()
    return RigidTransform(R, t)


def _initial_pose(object_points, xy):
    c = object_points - object_points.mean(axis=0)
    _, s, Vt = np.linalg.svd(c)
    if s[2] / s[0] < 1e-9:
        # planar target: express points in the plane frame and use a homography
        frame = RigidTransform(Vt.T, object_points.mean(axis=0))  # plane -> object
        plane = frame.inverse().apply(object_points)
        H = estimate_homography(plane[:, :2], xy)
        return _pose_from_homography(H) @ frame.inverse()
    return _dlt_pose(object_points, xy)


def _pnp_refine(object_points, image_points, K, pose, max_iter=100):
    k = _intrinsic_vector(K)

    def residual(p):
        R = rotvec_to_matrix(p[:3])
        X = object_points @ R.T + p[3:]
        if np.any(X[:, 2] <= 0):
            return np.full(2 * len(X), 1e6)
        return (_project_params(X, k) - image_points).ravel()

    x0 = np.concatenate([matrix_to_rotvec(pose.rotation), pose.translation])
    res = levenberg_marquardt(residual, x0, lambda p: _jacobian_pose(residual, p), max_iter=max_iter)
    return RigidTransform.from_rotvec(res.x[:3], res.x[3:]), res


def solve_pnp(object_points, image_points, K, ransac=False, threshold_px=3.0,
              ransac_iters=200, rng=None, return_info=False):
    """Pose ``T_object^camera`` from 3D-2D correspondences.

    Linear initialization (DLT, or a homography for planar targets) on
    undistorted normalized coordinates, followed by Levenberg-Marquardt on the
    pixel reprojection error. ``ransac=True`` wraps the minimal solver in an
    outlier-rejection loop before the final refinement.
    """
    object_points = np.asarray(object_points, dtype=float)
    image_points = np.asarray(image_points, dtype=float)
    if len(object_points) < 6 or len(object_points) != len(image_points):
        raise DegenerateConfiguration("PnP needs at least 6 matching correspondences")
    _check_not_collinear(object_points, "object points")
    xy = undistort(image_points, K)
    inliers = np.ones(len(object_points), dtype=bool)
    if ransac:
        rng = np.random.default_rng(0) if rng is None else rng
        best = None
        for _ in range(ransac_iters):
            idx = rng.choice(len(object_points), 6, replace=False)
            try:
                pose = _initial_pose(object_points[idx], xy[idx])
                X = pose.apply(object_points)
                if np.any(X[:, 2] <= 0):
                    continue
                err = np.linalg.norm(project(X, K) - image_points, axis=1)
            except (DegenerateConfiguration, np.linalg.LinAlgError):
                continue
            mask = err < threshold_px
            if best is None or mask.sum() > best.sum():
                best = mask
        if best is None or best.sum() < 6:
            raise DegenerateConfiguration("RANSAC found no consensus set")
        inliers = best
    pose = _initial_pose(object_points[inliers], xy[inliers])
    pose, res = _pnp_refine(object_points[inliers], image_points[inliers], K, pose)
    if not res.converged:
        raise NoConvergence("PnP refinement did not converge")
    if return_info:
        return pose, dict(inliers=inliers, rms=math.sqrt(res.cost / inliers.sum()), lm=res)
    return pose


# ---------------------------------------------------------------------------
# intrinsic refinement


@dataclass
class RefineInfo:
    rms_initial: float
    rms: float
    cost_trace: list
    converged: bool
    board_poses: list  # T_board^camera per observation


def _views(observations):
    obj = np.concatenate([o.board.object_points for o in observations])
    img = np.concatenate([o.image_points for o in observations])
    vidx = np.concatenate([np.full(len(o.image_points), i) for i, o in enumerate(observations)])
    return obj, img, vidx


def refine_intrinsics(initial, observations, rational=True, max_iter=100, poses=None):
    """Joint LM over intrinsics, all 8 distortion coefficients and per-view board poses.

    Runs in two nested stages: first with the rational denominator (k4..k6)
    held at its initial value, then with everything free starting from that
    solution. When the lens is explained by the polynomial terms alone the
    second stage stays put, which pins down the otherwise non-unique
    numerator/denominator split.
    """
    observations = list(observations)
    obj, img, vidx = _views(observations)
    n_views = len(observations)
    if poses is None:
        poses = []
        for o in observations:
            xy = undistort(o.image_points, initial)
            poses.append(_initial_pose(o.board.object_points, xy))
    k0 = _intrinsic_vector(initial)
    p0 = np.concatenate([np.concatenate([matrix_to_rotvec(P.rotation), P.translation]) for P in poses])
    full0 = np.concatenate([k0, p0])

    def residual_full(full):
        k = full[:12]
        pv = full[12:].reshape(n_views, 6)
        R = _rodrigues_batch(pv[:, :3])
        X = np.einsum("nij,nj->ni", R[vidx], obj) + pv[vidx, 3:]
        if np.any(X[:, 2] <= 0):
            return np.full(2 * len(X), 1e6)
        return (_project_params(X, k) - img).ravel()

    def run(full, free_k):
        def unpack(x):
            f = full.copy()
            f[free_k] = x[: len(free_k)]
            f[12:] = x[len(free_k):]
            return f

        def residual(x):
            return residual_full(unpack(x))

        def jacobian(x):
            f = unpack(x)
            cols = []
            for j in free_k:
                h = 1e-6 * max(abs(f[j]), 1.0)
                e = np.zeros_like(f)
                e[j] = h
                cols.append((residual_full(f + e) - residual_full(f - e)) / (2 * h))
            J = np.zeros((2 * len(obj), len(free_k) + 6 * n_views))
            if cols:
                J[:, : len(free_k)] = np.stack(cols, axis=1)
            rows_view = np.repeat(vidx, 2)
            for k in range(6):
                # pose parameters of different views touch disjoint residuals,
                # so one evaluation per parameter slot serves every view
                h = 1e-7
                e = np.zeros_like(f)
                e[12 + k::6] = h
                d = (residual_full(f + e) - residual_full(f - e)) / (2 * h)
                J[np.arange(J.shape[0]), len(free_k) + rows_view * 6 + k] = d
            return J

        x0 = np.concatenate([full[free_k], full[12:]])
        res = levenberg_marquardt(residual, x0, jacobian, max_iter=max_iter)
        return unpack(res.x), res

    r0 = residual_full(full0)
    rms0 = math.sqrt(float(r0 @ r0) / len(obj))
    stage1_free = np.array([0, 1, 2, 3, 4, 5, 6, 10, 11])
    full, res1 = run(full0, stage1_free)
    trace = list(res1.cost_trace)
    converged = res1.converged
    if rational:
        full, res2 = run(full, np.arange(12))
        trace += res2.cost_trace[1:]
        converged = res2.converged
    r = residual_full(full)
    rms = math.sqrt(float(r @ r) / len(obj))
    k = full[:12]
    K = Intrinsics(k[0], k[1], k[2], k[3], initial.width, initial.height, k[4:10], k[10:12])
    pv = full[12:].reshape(n_views, 6)
    board_poses = [RigidTransform.from_rotvec(p[:3], p[3:]) for p in pv]
    if not converged:
        log.warning("intrinsic refinement hit %d iterations without converging", max_iter)
    return K, RefineInfo(rms0, rms, trace, converged, board_poses)


def calibrate_intrinsics(observations, width, height, rational=True):
    """Zhang initialization followed by :func:`refine_intrinsics`."""
    Hs = [estimate_homography(o.board.object_points[:, :2], o.image_points) for o in observations]
    K0 = zhang_intrinsics(Hs, width, height)
    return refine_intrinsics(K0, observations, rational=rational)


# ---------------------------------------------------------------------------
# extrinsics and depth


def chain_extrinsics(T_rgb_depth, T_event_depth):
    """``T_rgb^event = (T_event^depth)^-1 T_rgb^depth`` and its inverse."""
    T_rgb_event = T_event_depth.inverse() @ T_rgb_depth
    return T_rgb_event, T_rgb_event.inverse()


def mean_transform(transforms):
    """Chordal L2 mean of rotations with the arithmetic mean of translations."""
    R = orthonormalize(sum(T.rotation for T in transforms))
    t = np.mean([T.translation for T in transforms], axis=0)
    return RigidTransform(R, t)


def relative_extrinsics(poses_a, poses_b):
    """``T_a^b`` from board poses seen simultaneously by cameras a and b."""
    return mean_transform([Pb @ Pa.inverse() for Pa, Pb in zip(poses_a, poses_b)])


def fit_depth_polynomial(samples):
    """Least-squares fit of ``e = z_measured - z_expected`` as a quadratic in ``z_measured``.

    ``samples`` is an (N, 2) array-like of (z_measured, z_expected) in mm.
    """
    s = np.asarray(samples, dtype=float).reshape(-1, 2)
    z, z_exp = s[:, 0], s[:, 1]
    if len(np.unique(z)) < 3:
        raise RankDeficient("need at least 3 distinct depths for a quadratic")
    e = z - z_exp
    scale = float(np.max(np.abs(z)))
    u = z / scale
    A = np.stack([u * u, u, np.ones_like(u)], axis=1)
    coef, *_ = np.linalg.lstsq(A, e, rcond=None)
    resid = e - A @ coef
    rms = math.sqrt(float(np.mean(resid ** 2)))
    return DepthCorrection(float(coef[0] / scale ** 2), float(coef[1] / scale), float(coef[2]), rms)


@dataclass
class ReprojectionReport:
    per_image: dict
    rms: float

    def to_dict(self):
        return {"per_image_rms_px": {str(k): v for k, v in self.per_image.items()},
                "rms_px": self.rms}


def reprojection_report(pairs, K_target, T_source_target):
    """RMS of cross-camera reprojection.

    ``pairs`` holds ``(image_id, points_source (N, 3) m, pixels_target (N, 2))``:
    3D corners in the source camera are moved into the target camera, projected
    and compared with the corners the target camera observed.
    """
    per_image = {}
    sq_total, n_total = 0.0, 0
    for image_id, pts, pix in pairs:
        pred = project(T_source_target.apply(pts), K_target)
        sq = np.sum((pred - np.asarray(pix, dtype=float)) ** 2, axis=1)
        per_image[image_id] = math.sqrt(float(sq.mean()))
        sq_total += float(sq.sum())
        n_total += len(sq)
    rms = math.sqrt(sq_total / n_total) if n_total else float("nan")
    return ReprojectionReport(per_image, rms)


# ---------------------------------------------------------------------------
# whole-rig pipeline


@dataclass
class CalibrationResult:
    rig: Rig
    intrinsic_info: dict
    depth_to_rgb: ReprojectionReport
    depth_samples: np.ndarray = field(repr=False, default=None)

    def report(self):
        return {
            "schema_version": 1,
            "intrinsics_rms_px": {c: i.rms for c, i in self.intrinsic_info.items()},
            "intrinsics_converged": {c: i.converged for c, i in self.intrinsic_info.items()},
            "depth_to_rgb": self.depth_to_rgb.to_dict(),
            "depth_correction_rms_mm": self.rig.depth_correction.rms,
        }


def calibrate_rig(observations, sizes, rational=True):
    """Intrinsics for each camera, extrinsics by PnP, then the depth-error polynomial.

    ``sizes`` maps camera id to (width, height).
    """
    by_cam = {c: [o for o in observations if o.camera_id == c] for c in CAMERAS}
    intr, info = {}, {}
    for cam in CAMERAS:
        if not by_cam[cam]:
            raise DegenerateConfiguration(f"no observations for camera {cam}")
        w, h = sizes[cam]
        intr[cam], info[cam] = calibrate_intrinsics(by_cam[cam], w, h, rational=rational)

    def board_poses(cam):
        return {o.image_id: solve_pnp(o.board.object_points, o.image_points, intr[cam])
                for o in by_cam[cam]}

    poses = {cam: board_poses(cam) for cam in CAMERAS}

    def extrinsic(a, b):
        shared = sorted(set(poses[a]) & set(poses[b]))
        if not shared:
            raise DegenerateConfiguration(f"no image seen by both {a} and {b}")
        return relative_extrinsics([poses[a][i] for i in shared], [poses[b][i] for i in shared])

    T_rgb_depth = extrinsic("RGB", "DEPTH")
    T_event_depth = extrinsic("EVENT", "DEPTH")

    samples = []
    for o in by_cam["DEPTH"]:
        if o.depth_mm is None:
            continue
        z_exp = poses["DEPTH"][o.image_id].apply(o.board.object_points)[:, 2] * 1000.0
        samples.append(np.stack([o.depth_mm, z_exp], axis=1))
    correction = fit_depth_polynomial(np.concatenate(samples)) if samples else DepthCorrection()
    rig = Rig(intr["RGB"], intr["DEPTH"], intr["EVENT"], T_rgb_depth, T_event_depth, correction)

    rgb_obs = {o.image_id: o for o in by_cam["RGB"]}
    pairs = []
    T_depth_rgb = T_rgb_depth.inverse()
    for o in by_cam["DEPTH"]:
        if o.depth_mm is None or o.image_id not in rgb_obs:
            continue
        z = correct_depth(o.depth_mm, correction)
        pts = backproject(o.image_points, z, intr["DEPTH"])
        pairs.append((o.image_id, pts, rgb_obs[o.image_id].image_points))
    report = reprojection_report(pairs, intr["RGB"], T_depth_rgb)
    return CalibrationResult(rig, info, report,
                             np.concatenate(samples) if samples else np.zeros((0, 2)))


# ---------------------------------------------------------------------------
# observation files: JSON Lines, one record per line


def save_observations(path, observations, sizes):
    with open(path, "w") as f:
        for cam, (w, h) in sizes.items():
            f.write(json.dumps({"type": "camera", "camera_id": cam, "width": w, "height": h}) + "\n")
        for o in observations:
            rec = {"type": "corners", "camera_id": o.camera_id, "image_id": o.image_id,
                   "board": {"rows": o.board.rows, "cols": o.board.cols, "square": o.board.square},
                   "corners": o.image_points.tolist()}
            if o.depth_mm is not None:
                rec["depth_mm"] = o.depth_mm.tolist()
            f.write(json.dumps(rec) + "\n")


def load_observations(path):
    """Parse an observation file; errors carry the offending line number."""
    observations, sizes = [], {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                rec = json.loads(line)
                kind = rec.get("type", "corners")
                if kind == "camera":
                    sizes[rec["camera_id"]] = (int(rec["width"]), int(rec["height"]))
                elif kind == "corners":
                    b = rec["board"]
                    observations.append(CheckerboardObservation(
                        BoardSpec(int(b["rows"]), int(b["cols"]), float(b["square"])),
                        rec["corners"], rec["camera_id"], int(rec["image_id"]),
                        rec.get("depth_mm")))
                else:
                    raise ValueError(f"unknown record type {kind!r}")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                msg = exc.msg if isinstance(exc, json.JSONDecodeError) else str(exc)
                if isinstance(exc, KeyError):
                    msg = f"missing field {exc}"
                raise FormatError(msg, path, lineno) from None
    return observations, sizes


# ---------------------------------------------------------------------------
# synthetic rig: ground truth for closure tests and demos


def default_rig():
    """A Kinect-Azure-like RGB/depth pair with a DAVIS346-like event camera on top."""
    rgb = Intrinsics(605.0, 604.0, 638.5, 362.0, 1280, 720, [-0.2, 0, 0, 0, 0, 0], [0.001, 0.0])
    depth = Intrinsics(504.0, 505.0, 322.0, 327.5, 640, 576, [0.08, -0.05, 0, 0, 0, 0], [0.0, -0.0005])
    event = Intrinsics(320.0, 321.0, 172.5, 131.0, 346, 260, [-0.25, 0.08, 0, 0, 0, 0], [0.0005, 0.0002])
    T_rgb_depth = RigidTransform(rotvec_to_matrix(np.radians([6.0, -0.3, 0.2])),
                                 [0.032, -0.002, 0.004])
    T_event_depth = RigidTransform(rotvec_to_matrix(np.radians([-1.0, 1.5, 0.5])),
                                   [0.010, 0.055, -0.010])
    corr = DepthCorrection(2e-6, 0.004, -1.5)
    return Rig(rgb, depth, event, T_rgb_depth, T_event_depth, corr)


def _measured_depth(z_true_mm, corr):
    """Raw reading z with z - e(z) = z_true (the fitted model inverts exactly)."""
    a, b, c = corr.a, corr.b - 1.0, corr.c + z_true_mm
    if a == 0:
        return -c / b
    disc = np.sqrt(b * b - 4 * a * c)
    r1 = (-b - disc) / (2 * a)
    r2 = (-b + disc) / (2 * a)
    return np.where(np.abs(r1 - z_true_mm) < np.abs(r2 - z_true_mm), r1, r2)


def sample_board_pose(rng, distance=(0.9, 1.6), tilt_deg=35.0, spread=0.15, board=DEFAULT_BOARD):
    """Board pose in depth-camera coordinates, centered near the optical axis."""
    center = np.array([(board.cols - 1) * board.square / 2, (board.rows - 1) * board.square / 2, 0])
    rv = np.radians(rng.uniform(-tilt_deg, tilt_deg, 3) * np.array([1, 1, 0.5]))
    R = rotvec_to_matrix(rv) @ rotvec_to_matrix([math.pi, 0, 0])  # board faces the camera
    c = np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread),
                  rng.uniform(*distance)])
    return RigidTransform(R, c - R @ center)


def synthetic_observations(rig, n_views, rng, noise_px=0.0, board=DEFAULT_BOARD, cameras=CAMERAS,
                           max_tries=10000, **pose_kw):
    """Render board corners for every camera; only views fully visible to all cameras are kept.

    Returns (observations, board poses in depth-camera coordinates, sizes).
    """
    T_depth = {"DEPTH": RigidTransform.identity(), "RGB": rig.T_rgb_depth.inverse(),
               "EVENT": rig.T_event_depth.inverse()}
    K = {"RGB": rig.rgb, "DEPTH": rig.depth, "EVENT": rig.event}
    obs, truth = [], []
    tries = 0
    while len(truth) < n_views:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place enough fully visible boards")
        pose = sample_board_pose(rng, board=board, **pose_kw)
        views = {}
        ok = True
        for cam in cameras:
            X = (T_depth[cam] @ pose).apply(board.object_points)
            if np.any(X[:, 2] <= 0.1):
                ok = False
                break
            px = project(X, K[cam])
            margin = 5
            if (np.any(px < margin) or np.any(px[:, 0] > K[cam].width - margin)
                    or np.any(px[:, 1] > K[cam].height - margin)):
                ok = False
                break
            views[cam] = (X, px)
        if not ok:
            continue
        image_id = len(truth)
        truth.append(pose)
        for cam, (X, px) in views.items():
            noisy = px + rng.normal(0, noise_px, px.shape) if noise_px > 0 else px
            depth_mm = None
            if cam == "DEPTH":
                depth_mm = _measured_depth(X[:, 2] * 1000.0, rig.depth_correction)
            obs.append(CheckerboardObservation(board, noisy, cam, image_id, depth_mm))
    sizes = {c: (K[c].width, K[c].height) for c in cameras}
    return obs, truth, sizes
