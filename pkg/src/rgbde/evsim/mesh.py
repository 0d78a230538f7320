"""Textured triangle meshes and procedural stand-ins for scanned objects and backgrounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, zoom


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) m, object frame
    triangles: np.ndarray  # (T, 3) vertex indices, counter-clockwise seen from outside
    uv: np.ndarray  # (V, 2) in [0, 1]
    texture: np.ndarray  # (H, W, 3) in [0, 1]
    center_of_mass: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=float)
        self.texture = np.asarray(self.texture, dtype=float)
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.uv) != len(self.vertices):
            raise ValueError("need one uv per vertex")
        if np.any(self.face_areas() <= 0):
            raise ValueError("mesh has degenerate triangles")
        if self.center_of_mass is None:
            self.center_of_mass = solid_center_of_mass(self.vertices, self.triangles)
        self.center_of_mass = np.asarray(self.center_of_mass, dtype=float)

    def face_areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def extent(self):
        return self.vertices.max(axis=0) - self.vertices.min(axis=0)


def solid_center_of_mass(vertices, triangles):
    """Center of mass of the enclosed uniform-density solid (signed tetrahedra)."""
    v = vertices[triangles]
    vol = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])) / 6.0
    if abs(vol.sum()) < 1e-15:
        return vertices.mean(axis=0)
    centroids = v.sum(axis=1) / 4.0
    return (vol[:, None] * centroids).sum(axis=0) / vol.sum()


def smooth_texture(rng, height=128, width=256, scale=4.0, saturation=0.6):
    """Random smooth RGB texture in [0, 1] with a few sharp-edged patches."""
    tex = np.empty((height, width, 3))
    for c in range(3):
        coarse = gaussian_filter(rng.random((height, width)), scale, mode="wrap")
        fine = gaussian_filter(rng.random((height, width)), scale / 4, mode="wrap")
        tex[..., c] = 0.7 * _stretch(coarse) + 0.3 * _stretch(fine)
    gray = tex.mean(axis=2, keepdims=True)
    tex = gray + saturation * (tex - gray)
    for _ in range(6):
        y, x = rng.integers(0, height), rng.integers(0, width)
        h, w = rng.integers(height // 16, height // 4), rng.integers(width // 16, width // 4)
        tex[y:y + h, x:x + w] = rng.random(3)
    return np.clip(tex, 0.0, 1.0)


def _stretch(a):
    lo, hi = np.percentile(a, [2, 98])
    return np.clip((a - lo) / max(hi - lo, 1e-12), 0, 1)


def make_background(rng, width=346, height=260):
    """A cluttered random image playing the role of a scene photograph."""
    img = smooth_texture(rng, height // 2, width // 2, scale=3.0, saturation=0.8)
    img = zoom(img, (height / img.shape[0], width / img.shape[1], 1), order=1)
    return np.clip(img, 0, 1)


def make_blob_mesh(rng=None, n_lat=16, n_lon=32, radii=(0.085, 0.06, 0.05), bumpiness=0.18,
                   texture=None):
    """A lumpy, asymmetric closed surface about the size of a small toy figure.

    Built as a UV sphere with a smooth random radial displacement, then shifted
    so the center of mass sits at the object origin.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    lat = np.linspace(0, np.pi, n_lat + 1)
    lon = np.linspace(0, 2 * np.pi, n_lon + 1)
    LAT, LON = np.meshgrid(lat, lon, indexing="ij")
    dirs = np.stack([np.sin(LAT) * np.cos(LON), np.sin(LAT) * np.sin(LON), np.cos(LAT)], axis=-1)
    bump = np.zeros_like(LAT)
    for _ in range(4):
        a, b = rng.integers(1, 4, 2)
        ph = rng.uniform(0, 2 * np.pi, 2)
        bump += rng.uniform(0.3, 1.0) * np.sin(a * LAT + ph[0]) * np.cos(b * LON + ph[1])
    # keep the poles and the seam single-valued
    bump = bump * np.sin(LAT) ** 2
    r = 1 + bumpiness * bump / np.abs(bump).max()
    pts = dirs * r[..., None] * np.asarray(radii)
    uv = np.stack([LON / (2 * np.pi), LAT / np.pi], axis=-1)
    verts = pts.reshape(-1, 3)
    uvs = uv.reshape(-1, 2)
    idx = np.arange((n_lat + 1) * (n_lon + 1)).reshape(n_lat + 1, n_lon + 1)
    tris = []
    for i in range(n_lat):
        for j in range(n_lon):
            a, b, c, d = idx[i, j], idx[i, j + 1], idx[i + 1, j], idx[i + 1, j + 1]
            if i > 0:
                tris.append((a, c, b))
            if i < n_lat - 1:
                tris.append((b, c, d))
    tris = np.array(tris)
    v = verts[tris]
    vol = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum()
    if vol < 0:
        tris = tris[:, [0, 2, 1]]
    com = solid_center_of_mass(verts, tris)
    verts = verts - com
    if texture is None:
        texture = smooth_texture(rng)
    return TriangleMesh(verts, tris, uvs, texture, np.zeros(3))


def make_quad_mesh(corners, texture=None):
    """A single planar quad (two triangles) with corners in counter-clockwise order."""
    corners = np.asarray(corners, dtype=float)
    if texture is None:
        texture = np.ones((2, 2, 3))
    uv = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    return TriangleMesh(corners, np.array([[0, 1, 2], [0, 2, 3]]), uv, texture, corners.mean(axis=0))
