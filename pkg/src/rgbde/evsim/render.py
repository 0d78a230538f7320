"""Vectorized z-buffer rasterizer for a textured mesh in front of a background plane.

Pixel centers sit at integer coordinates. Projection is ideal pinhole: the
simulated sensors are treated as already undistorted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geom import RigidTransform

LUMA = np.array([0.299, 0.587, 0.114])
HEADLIGHT = np.array([0.0, 0.0, -1.0])  # from the surface toward the camera


@dataclass(eq=False)
class Scene:
    mesh: object  # TriangleMesh
    background: np.ndarray | None = None  # (H, W, 3) texture on a fronto-parallel plane
    background_depth: float = 1.5  # m, only used for depth maps


@dataclass(eq=False)
class RenderResult:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) m, background_depth where the object is absent
    mask: np.ndarray  # (H, W) bool, object coverage

    @property
    def gray(self):
        return self.rgb @ LUMA


def _fit_background(background, width, height):
    if background is None:
        return np.ones((height, width, 3))
    bg = np.asarray(background, dtype=float)
    if bg.ndim == 2:
        bg = np.repeat(bg[..., None], 3, axis=2)
    if bg.shape[:2] != (height, width):
        ys = np.minimum((np.arange(height) + 0.5) * bg.shape[0] / height, bg.shape[0] - 1).astype(int)
        xs = np.minimum((np.arange(width) + 0.5) * bg.shape[1] / width, bg.shape[1] - 1).astype(int)
        bg = bg[ys][:, xs]
    return bg


def sample_texture(texture, uv):
    """Bilinear lookup, u along width and v along height, edges clamped."""
    H, W = texture.shape[:2]
    x = np.clip(uv[:, 0], 0, 1) * (W - 1)
    y = np.clip(uv[:, 1], 0, 1) * (H - 1)
    x0 = np.minimum(np.floor(x).astype(int), W - 2) if W > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), H - 2) if H > 1 else np.zeros(len(y), int)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    top = texture[y0, x0] * (1 - fx) + texture[y0, x1] * fx
    bot = texture[y1, x0] * (1 - fx) + texture[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def rasterize(vertices_cam, triangles, K, cull_backfaces=True, near=1e-3):
    """Visible (pixel, triangle, barycentric, depth) samples after the z-test.

    Returns flat pixel indices, triangle ids, perspective-correct barycentric
    weights (N, 3) and depths (N,), one entry per covered pixel.
    """
    W, H = K.width, K.height
    v = vertices_cam[triangles]  # (T, 3, 3)
    z = v[..., 2]
    keep = np.all(z > near, axis=1)
    u = K.fx * v[..., 0] / np.where(z > near, z, 1) + K.cx
    w = K.fy * v[..., 1] / np.where(z > near, z, 1) + K.cy
    e1u, e1v = u[:, 1] - u[:, 0], w[:, 1] - w[:, 0]
    e2u, e2v = u[:, 2] - u[:, 0], w[:, 2] - w[:, 0]
    det = e1u * e2v - e2u * e1v
    keep &= det != 0
    if cull_backfaces:
        # with x right and y down, a face turned toward the camera winds negatively
        keep &= det < 0
    xmin = np.clip(np.ceil(u.min(axis=1)), 0, W).astype(np.int64)
    xmax = np.clip(np.floor(u.max(axis=1)), -1, W - 1).astype(np.int64)
    ymin = np.clip(np.ceil(w.min(axis=1)), 0, H).astype(np.int64)
    ymax = np.clip(np.floor(w.max(axis=1)), -1, H - 1).astype(np.int64)
    bw = np.maximum(xmax - xmin + 1, 0)
    bh = np.maximum(ymax - ymin + 1, 0)
    count = np.where(keep, bw * bh, 0)
    tri = np.repeat(np.arange(len(triangles)), count)
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0))
    if tri.size == 0:
        return empty
    start = np.repeat(np.cumsum(count) - count, count)
    local = np.arange(tri.size) - start
    px = xmin[tri] + local % bw[tri]
    py = ymin[tri] + local // bw[tri]
    du = px - u[tri, 0]
    dv = py - w[tri, 0]
    d = det[tri]
    l1 = (e2v[tri] * du - e2u[tri] * dv) / d
    l2 = (-e1v[tri] * du + e1u[tri] * dv) / d
    l0 = 1.0 - l1 - l2
    inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
    tri, px, py = tri[inside], px[inside], py[inside]
    lam = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)
    zt = z[tri]
    inv_z = (lam / zt).sum(axis=1)
    depth = 1.0 / inv_z
    bary = lam / zt * depth[:, None]
    pid = py * W + px
    order = np.lexsort((depth, pid))
    pid_s = pid[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pid_s[1:] != pid_s[:-1]
    sel = order[first]
    if sel.size == 0:
        return empty
    return pid[sel], tri[sel], bary[sel], depth[sel]


def render(scene, pose, K, ambient_ratio=0.5, cull_backfaces=True):
    """Shade the mesh at ``pose`` (object -> camera) over the background.

    shade = ambient * albedo + (1 - ambient) * albedo * max(0, n . l) with a
    headlight l; the background plane faces the camera and keeps its albedo.
    """
    mesh = scene.mesh
    W, H = K.width, K.height
    rgb = _fit_background(scene.background, W, H).reshape(-1, 3).copy()
    depth = np.full(W * H, float(scene.background_depth))
    mask = np.zeros(W * H, dtype=bool)
    if not isinstance(pose, RigidTransform):
        pose = RigidTransform.from_matrix(pose)
    vc = pose.apply(mesh.vertices)
    pid, tri, bary, z = rasterize(vc, mesh.triangles, K, cull_backfaces=cull_backfaces)
    if pid.size:
        uv = np.einsum("nk,nkj->nj", bary, mesh.uv[mesh.triangles[tri]])
        albedo = sample_texture(mesh.texture, uv)
        fv = vc[mesh.triangles]
        n = np.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        lambert = np.maximum(0.0, n @ HEADLIGHT)[tri]
        shade = ambient_ratio + (1.0 - ambient_ratio) * lambert
        rgb[pid] = albedo * shade[:, None]
        depth[pid] = z
        mask[pid] = True
    return RenderResult(rgb.reshape(H, W, 3), depth.reshape(H, W), mask.reshape(H, W))


def render_depth(mesh, pose, K, cull_backfaces=True):
    """Object-only depth map (m, ``inf`` where empty), used for visibility tests."""
    vc = pose.apply(mesh.vertices)
    pid, _, _, z = rasterize(vc, mesh.triangles, K, cull_backfaces=cull_backfaces)
    depth = np.full(K.width * K.height, np.inf)
    depth[pid] = z
    return depth.reshape(K.height, K.width)
