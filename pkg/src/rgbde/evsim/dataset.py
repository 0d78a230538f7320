"""Randomized training samples and on-disk datasets of cropped event windows."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import EmptyDataset, FormatError, ObjectOutOfFrustum
from ..evtensor import BOX_SIZE, CropBox, projected_bbox
from ..geom import PoseDelta, apply_delta, matrix_to_euler_xyz, sample_pose_delta, sample_rotation
from .events import read_events, write_events
from .render import Scene
from .simulate import SimConfig, add_sensor_noise, default_event_intrinsics, generate_events, static_pose

MANIFEST_SCHEMA_VERSION = 1
DISTANCE_RANGE = (0.45, 0.8)  # m
CONTRAST_MEAN, CONTRAST_STD = 0.18, 0.03
CROP_JITTER_STD = 25.0  # px
MAX_ATTEMPTS = 20


@dataclass(eq=False)
class TrainingSample:
    events: object  # EventStream, cropped to ``bbox``
    bbox: CropBox
    delta: PoseDelta
    distance: float
    contrast_threshold: float
    ambient_ratio: float

    @property
    def label(self):
        """Translation (m) followed by intrinsic XYZ Euler angles (rad) of the delta."""
        return np.concatenate([self.delta.translation, matrix_to_euler_xyz(self.delta.rotation)])


def make_training_sample(mesh, background, rng, config=SimConfig(), K=None, noise=True,
                         randomize_sensor=True):
    """One simulated 33 ms event window of the object moved by a random delta.

    The object starts at a random distance and orientation with its center of
    mass on the optical axis. Contrast threshold and ambient ratio are drawn
    per sample when ``randomize_sensor`` is set. The crop is the projected
    cube around the start position, shifted by Gaussian jitter.
    """
    K = default_event_intrinsics() if K is None else K
    distance = float(rng.uniform(*DISTANCE_RANGE))
    pose_start = static_pose(distance, sample_rotation(rng), mesh.center_of_mass)
    delta = sample_pose_delta(rng)
    if randomize_sensor:
        c = max(float(rng.normal(CONTRAST_MEAN, CONTRAST_STD)), 0.02)
        config = config.replace(contrast_threshold=c, ambient_ratio=float(rng.uniform(0.0, 1.0)))
    jitter = rng.normal(0.0, CROP_JITTER_STD, 2)
    pose_end = apply_delta(delta, pose_start, mesh.center_of_mass)
    bbox = projected_bbox(pose_start.apply(mesh.center_of_mass), K, BOX_SIZE).shifted(*jitter)
    if not bbox.intersects_image(K.width, K.height):
        raise ObjectOutOfFrustum(f"crop box {bbox} lies outside the {K.width}x{K.height} sensor")
    events = generate_events(Scene(mesh, background), pose_start, pose_end, K, config)
    events = events.filter(bbox.contains(events.x, events.y))
    if noise:
        events = add_sensor_noise(events, rng, config, bbox)
    return TrainingSample(events, bbox, delta, distance, config.contrast_threshold, config.ambient_ratio)


def sample_rng(seed, index, attempt=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(attempt)]))


def _make_indexed(index, seed, meshes, backgrounds, per_background, config, K, noise):
    mesh = meshes[index % len(meshes)]
    background = backgrounds[index // per_background]
    for attempt in range(MAX_ATTEMPTS):
        try:
            return make_training_sample(mesh, background, sample_rng(seed, index, attempt), config, K, noise)
        except ObjectOutOfFrustum:
            continue
    raise ObjectOutOfFrustum(f"sample {index}: no valid placement after {MAX_ATTEMPTS} attempts")


_WORKER = {}


def _init_worker(meshes, backgrounds):
    _WORKER["meshes"], _WORKER["backgrounds"] = meshes, backgrounds


def _worker_task(args):
    index, seed, per_background, config, K, noise = args
    return _make_indexed(index, seed, _WORKER["meshes"], _WORKER["backgrounds"], per_background,
                         config, K, noise)


def generate_samples(meshes, backgrounds, count_per_background, seed, config=SimConfig(), K=None,
                     noise=True, threads=1):
    """Samples for every background, in index order.

    Sample ``i`` uses background ``i // count_per_background`` and its own
    generator seeded by ``(seed, i)``, so the result does not depend on
    ``threads``.
    """
    if not backgrounds:
        raise EmptyDataset("need at least one background")
    if not meshes:
        raise EmptyDataset("need at least one mesh")
    K = default_event_intrinsics() if K is None else K
    total = len(backgrounds) * count_per_background
    if threads <= 1 or total < 2:
        return [_make_indexed(i, seed, meshes, backgrounds, count_per_background, config, K, noise)
                for i in range(total)]
    tasks = [(i, seed, count_per_background, config, K, noise) for i in range(total)]
    with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(meshes, backgrounds)) as pool:
        return list(pool.map(_worker_task, tasks, chunksize=max(1, total // (4 * threads))))


def _sample_entry(i, sample):
    b = sample.bbox
    return {
        "file": f"sample_{i:06d}.evt",
        "label": [float(v) for v in sample.label],
        "translation": [float(v) for v in sample.delta.translation],
        "rotvec": [float(v) for v in sample.delta.rotation_axis * sample.delta.rotation_magnitude],
        "bbox": [b.cx, b.cy, b.size],
        "distance": sample.distance,
        "contrast_threshold": sample.contrast_threshold,
        "ambient_ratio": sample.ambient_ratio,
        "num_events": len(sample.events),
    }


def generate_dataset(meshes, backgrounds, count_per_background, out_dir, seed, config=SimConfig(),
                     K=None, noise=True, threads=1, force=False):
    """Write ``sample_*.evt`` files plus ``manifest.json``; returns the manifest dict."""
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists (use force to overwrite)")
    K = default_event_intrinsics() if K is None else K
    samples = generate_samples(meshes, backgrounds, count_per_background, seed, config, K, noise, threads)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        entry = _sample_entry(i, sample)
        entry["background"] = i // count_per_background
        write_events(out / entry["file"], sample.events)
        entries.append(entry)
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "seed": int(seed),
        "count": len(entries),
        "count_per_background": count_per_background,
        "num_backgrounds": len(backgrounds),
        "sensor": K.to_dict(),
        "config": dict(config.__dict__),
        "noise": bool(noise),
        "samples": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def manifest_hash(path):
    """SHA-256 over the manifest and every sample file it lists."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    h = hashlib.sha256(manifest_path.read_bytes())
    for entry in json.loads(manifest_path.read_text())["samples"]:
        h.update((manifest_path.parent / entry["file"]).read_bytes())
    return h.hexdigest()


def load_dataset(out_dir):
    """Read a dataset back as a list of ``(EventStream, CropBox, label)`` triples."""
    root = Path(out_dir)
    manifest_path = root / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", manifest_path, exc.lineno) from None
    samples = []
    for entry in manifest["samples"]:
        events = read_events(root / entry["file"])
        bbox = CropBox(*entry["bbox"])
        samples.append((events, bbox, np.asarray(entry["label"], dtype=float)))
    if not samples:
        raise EmptyDataset(f"{root} holds no samples")
    return samples


def label_to_delta(label):
    """Inverse of :attr:`TrainingSample.label`."""
    from ..geom import euler_xyz_to_matrix, matrix_to_rotvec

    return PoseDelta.from_vectors(label[:3], matrix_to_rotvec(euler_xyz_to_matrix(label[3:])))


def crop_size_for_distance(distance, K=None):
    """Side length in pixels of the projected crop for an object at ``distance``."""
    K = default_event_intrinsics() if K is None else K
    return projected_bbox((0.0, 0.0, distance), K).size

