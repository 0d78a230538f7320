"""Event Spike Tensor: signed per-bin event counts over a square crop, resized and normalized."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import project
from .errors import EmptyDataset, FormatError, ObjectOutOfFrustum, ZeroNormalizer

N_BINS = 9
TENSOR_SIZE = 150
WINDOW_US = 33_000
BOX_SIZE = 0.207  # m, side of the 3D box projected around the object


@dataclass(frozen=True)
class CropBox:
    """Square image region centered at (cx, cy) with side ``size`` pixels."""

    cx: float
    cy: float
    size: float

    @property
    def side(self):
        return max(1, int(round(self.size)))

    @property
    def x0(self):
        return int(round(self.cx - self.side / 2))

    @property
    def y0(self):
        return int(round(self.cy - self.side / 2))

    def contains(self, x, y):
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        return (x >= self.x0) & (x < self.x0 + self.side) & (y >= self.y0) & (y < self.y0 + self.side)

    def shifted(self, dx, dy):
        return CropBox(float(self.cx + dx), float(self.cy + dy), float(self.size))

    def intersects_image(self, width, height):
        return (self.x0 < width and self.x0 + self.side > 0
                and self.y0 < height and self.y0 + self.side > 0)


def projected_bbox(center, K, box_size=BOX_SIZE):
    """Square hull of the projected corners of an axis-aligned cube around ``center``.

    ``center`` is in camera coordinates (m); the square side is the larger
    extent of the 2D hull.
    """
    center = np.asarray(center, dtype=float)
    h = box_size / 2
    offsets = np.array([[sx, sy, sz] for sx in (-h, h) for sy in (-h, h) for sz in (-h, h)])
    corners = center + offsets
    if np.any(corners[:, 2] <= 0):
        raise ObjectOutOfFrustum("bounding box reaches behind the camera")
    px = project(corners, K)
    lo, hi = px.min(axis=0), px.max(axis=0)
    c = (lo + hi) / 2
    return CropBox(float(c[0]), float(c[1]), float(np.max(hi - lo)))


@dataclass(eq=False)
class SpikeTensor:
    data: np.ndarray  # (bins, H, W)
    normalizer: float | None = None  # set once normalized

    @property
    def shape(self):
        return self.data.shape


def spike_counts(events, bbox, t_start, window_us=WINDOW_US, bins=N_BINS):
    """Native-resolution volume of (#positive - #negative) per (bin, y, x) inside ``bbox``.

    Bin index is ``floor((t - t_start) / window * bins)``, evaluated in integer
    microseconds; the window is half-open.
    """
    side = bbox.side
    vol = np.zeros((bins, side, side), dtype=np.int64)
    if len(events) == 0:
        return vol
    t = events.t.astype(np.int64) - int(t_start)
    keep = (t >= 0) & (t < window_us) & bbox.contains(events.x, events.y)
    t = t[keep]
    b = np.minimum((t * bins) // int(window_us), bins - 1)
    xs = events.x[keep].astype(np.int64) - bbox.x0
    ys = events.y[keep].astype(np.int64) - bbox.y0
    np.add.at(vol, (b, ys, xs), events.p[keep].astype(np.int64))
    return vol


def resize_weights(n_src, n_dst):
    """(n_dst, n_src) mass-preserving bilinear resampling matrix.

    The triangle kernel is widened by the scale factor when shrinking (area
    weighting), out-of-range taps are clamped to the border pixel, each row
    is normalized, and the result is scaled by ``n_src / n_dst`` so that the
    total count is preserved.
    """
    scale = n_src / n_dst
    support = max(scale, 1.0)
    W = np.zeros((n_dst, n_src))
    for i in range(n_dst):
        c = (i + 0.5) * scale
        lo = int(math.floor(c - support - 0.5))
        hi = int(math.ceil(c + support - 0.5))
        for j in range(lo, hi + 1):
            w = 1.0 - abs(j + 0.5 - c) / support
            if w > 0:
                W[i, min(max(j, 0), n_src - 1)] += w
        W[i] /= W[i].sum()
    return W * scale


_WEIGHT_CACHE = {}


def resize_volume(vol, size):
    n = vol.shape[-1]
    key = (n, size)
    if key not in _WEIGHT_CACHE:
        _WEIGHT_CACHE[key] = resize_weights(n, size)
    Wm = _WEIGHT_CACHE[key]
    return np.einsum("ij,bjk,lk->bil", Wm, vol.astype(float), Wm, optimize=True)


def build_spike_tensor(events, bbox, t_start=0, window_us=WINDOW_US, bins=N_BINS, size=TENSOR_SIZE):
    """Unnormalized spike tensor (bins, size, size) for the events in one window."""
    vol = spike_counts(events, bbox, t_start, window_us, bins)
    return SpikeTensor(resize_volume(vol, size))


def normalize(tensor, normalizer):
    if not normalizer or normalizer <= 0:
        raise ZeroNormalizer(f"normalizer must be positive, got {normalizer}")
    return SpikeTensor(tensor.data / normalizer, normalizer)


def compute_normalizer(tensors):
    """Largest absolute voxel value over a training set of unnormalized tensors."""
    peak = None
    for t in tensors:
        data = t.data if isinstance(t, SpikeTensor) else np.asarray(t)
        m = float(np.max(np.abs(data))) if data.size else 0.0
        peak = m if peak is None else max(peak, m)
    if peak is None:
        raise EmptyDataset("cannot compute a normalizer from an empty dataset")
    return peak


# ---------------------------------------------------------------------------
# tensor snapshots: b"TNS1", u32 ndim, u32 dims..., float32 row-major, little-endian

_MAGIC = b"TNS1"


def write_tensor(path, array):
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        f.write(a.tobytes())


def read_tensor(path):
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError("not a tensor snapshot", path)
    (ndim,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    n = int(np.prod(dims)) if ndim else 1
    if len(data) - offset != 4 * n:
        raise FormatError(f"expected {n} floats for dims {dims}", path)
    return np.frombuffer(data, dtype="<f4", offset=offset).reshape(dims).copy()
