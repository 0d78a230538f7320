"""ICP registration of a mesh to depth maps, used to annotate ground-truth poses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..camera import backproject
from ..errors import Degenerate, EmptyCrop
from ..evsim.render import render_depth
from ..geom import RigidTransform, matrix_to_rotvec, rotation_error, rotvec_to_matrix


def rigid_align(src, dst):
    """Least-squares rotation and translation mapping ``src`` points onto ``dst`` (Kabsch).

    A sign correction on the smallest singular direction keeps ``det(R) = +1``.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise Degenerate(f"need matching (N, 3) point sets, got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise Degenerate(f"need at least 3 point pairs, got {len(src)}")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - cs, dst - cd
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise Degenerate("source points are collinear")
    U, _, Vt = np.linalg.svd(A.T @ B)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


@dataclass(frozen=True)
class ICPConfig:
    max_iterations: int = 10
    convergence_deg: float = 10.0  # rotation change below which a frame counts as converged
    tolerance: float = 1e-5  # stop once the update (rad, and m / box_size) is this small
    alignment: str = "point_to_plane"  # or "point_to_point" (closed-form SVD via rigid_align)
    outlier_distance: float = 0.03  # m
    visibility_tolerance: float = 0.005  # m
    box_size: float = 0.28  # m, crop cube side around the previous pose


@dataclass
class ICPResult:
    pose: RigidTransform
    converged: bool
    iterations: int
    rotation_changes: list = field(default_factory=list)  # degrees, one per iteration


def visible_vertices(mesh, pose, K, tolerance=0.005):
    """Boolean mask of mesh vertices whose depth agrees with the rendered z-buffer at their pixel."""
    zbuf = render_depth(mesh, pose, K)
    vc = pose.apply(mesh.vertices)
    z = vc[:, 2]
    ok = z > 1e-6
    u = np.full(len(z), -1, dtype=np.int64)
    v = np.full(len(z), -1, dtype=np.int64)
    u[ok] = np.rint(K.fx * vc[ok, 0] / z[ok] + K.cx).astype(np.int64)
    v[ok] = np.rint(K.fy * vc[ok, 1] / z[ok] + K.cy).astype(np.int64)
    ok &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    vis = np.zeros(len(z), dtype=bool)
    vis[ok] = np.abs(zbuf[v[ok], u[ok]] - z[ok]) < tolerance
    return vis


def closest_points_on_triangles(points, tri_vertices):
    """Closest point on each triangle (M, 3, 3) to each point (M, 3), vectorized over pairs."""
    p = np.asarray(points, dtype=float)
    a, b, c = tri_vertices[:, 0], tri_vertices[:, 1], tri_vertices[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        out = a + v_in[:, None] * ab + w_in[:, None] * ac
        # edge regions
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out = np.where(on_bc[:, None], b + t_bc[:, None] * (c - b), out)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(on_ac[:, None], a + t_ac[:, None] * ac, out)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(on_ab[:, None], a + t_ab[:, None] * ab, out)
    # vertex regions
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    return out


class _SurfaceIndex:
    """Closest-point queries against a set of triangles."""

    def __init__(self, tri_vertices, candidates=12):
        self.tris = tri_vertices
        self.k = min(candidates, len(tri_vertices))
        self.tree = cKDTree(tri_vertices.mean(axis=1))
        n = np.cross(tri_vertices[:, 1] - tri_vertices[:, 0], tri_vertices[:, 2] - tri_vertices[:, 0])
        self.normals = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def closest(self, points, return_normals=False):
        _, idx = self.tree.query(points, k=self.k)
        idx = idx.reshape(len(points), self.k)
        rep = np.repeat(points, self.k, axis=0)
        cand = closest_points_on_triangles(rep, self.tris[idx.ravel()]).reshape(len(points), self.k, 3)
        d = np.linalg.norm(cand - points[:, None], axis=2)
        best = d.argmin(axis=1)
        rows = np.arange(len(points))
        if return_normals:
            return cand[rows, best], d[rows, best], self.normals[idx[rows, best]]
        return cand[rows, best], d[rows, best]


def _point_to_plane(target, local, normals):
    """Linearized least-squares model correction moving the surface planes at ``target`` onto ``local``."""
    A = np.hstack([np.cross(target, normals), normals])
    b = np.einsum("ij,ij->i", local - target, normals)
    x = np.linalg.lstsq(A, b, rcond=None)[0]
    return RigidTransform(rotvec_to_matrix(x[:3]), x[3:])


def icp_register(points, mesh, init_pose, K, camera_pose=None, config=ICPConfig()):
    """Align the visible part of ``mesh`` to a point cloud.

    ``points`` and ``init_pose`` are expressed in the world frame, and
    ``camera_pose`` maps camera to world (identity when the world is the
    camera). Every iteration recomputes visibility from a z-buffer render,
    matches each scene point to the closest point on the visible surface and
    solves for the rigid correction in closed form. Iteration stops when the
    update is below ``config.tolerance`` or after ``config.max_iterations``;
    the result counts as converged when the last rotation change is below
    ``config.convergence_deg``.
    """
    if config.alignment not in ("point_to_plane", "point_to_point"):
        raise ValueError(f"unknown alignment {config.alignment!r}")
    cam = RigidTransform.identity() if camera_pose is None else camera_pose
    to_cam = cam.inverse()
    scene = to_cam.apply(np.asarray(points, dtype=float))
    if len(scene) == 0:
        raise EmptyCrop("no scene points to register against")
    pose = to_cam @ init_pose
    changes = []
    converged = False
    for it in range(1, config.max_iterations + 1):
        vis = visible_vertices(mesh, pose, K, config.visibility_tolerance)
        if vis.sum() < 3:
            raise Degenerate("fewer than 3 mesh vertices are visible")
        # matching happens in object coordinates
        index = _SurfaceIndex(mesh.vertices[mesh.triangles[vis[mesh.triangles].any(axis=1)]])
        local = pose.inverse().apply(scene)
        target, dist, normals = index.closest(local, return_normals=True)
        keep = dist <= config.outlier_distance
        if keep.sum() < 3:
            raise Degenerate("fewer than 3 scene points lie within the outlier distance of the model")
        if config.alignment == "point_to_point":
            step = rigid_align(target[keep], local[keep])
        else:
            step = _point_to_plane(target[keep], local[keep], normals[keep])
        pose = pose @ step
        rv = matrix_to_rotvec(step.rotation)
        changes.append(math.degrees(float(np.linalg.norm(rv))))
        converged = changes[-1] < config.convergence_deg
        if np.linalg.norm(np.concatenate([rv, step.translation / config.box_size])) < config.tolerance:
            break
    return ICPResult(cam @ pose, converged, it, changes)


def crop_depth_points(depth_mm, K, center, box_size=0.28):
    """Back-projected depth pixels (m, camera frame) inside the cube of side ``box_size`` around ``center``."""
    depth_mm = np.asarray(depth_mm, dtype=float)
    v, u = np.nonzero(depth_mm > 0)
    if u.size == 0:
        raise EmptyCrop("depth map has no valid pixels")
    pts = backproject(np.stack([u, v], axis=1).astype(float), depth_mm[v, u], K)
    inside = np.all(np.abs(pts - np.asarray(center, dtype=float)) <= box_size / 2, axis=1)
    if not inside.any():
        raise EmptyCrop(f"no depth points inside the {box_size * 1000:.0f} mm box around {np.round(center, 3)}")
    return pts[inside]


@dataclass
class Annotation:
    poses: list
    converged: list
    iterations: list

    @property
    def flagged(self):
        """Frames needing manual review (did not converge)."""
        return [i for i, c in enumerate(self.converged) if not c]


def icp_annotate(depth_frames, K, mesh, initial_pose, config=ICPConfig()):
    """Ground-truth poses for a depth sequence, each frame initialized from the previous result."""
    poses, converged, iterations = [], [], []
    pose = initial_pose
    for depth in depth_frames:
        pts = crop_depth_points(depth, K, pose.apply(mesh.center_of_mass), config.box_size)
        res = icp_register(pts, mesh, pose, K, None, config)
        pose = res.pose
        poses.append(pose)
        converged.append(res.converged)
        iterations.append(res.iterations)
    return Annotation(poses, converged, iterations)
