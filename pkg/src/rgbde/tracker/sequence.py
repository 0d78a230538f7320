"""Tracking sequences: synthetic generation, frame-rate downsampling and directory IO."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from ..camera import Intrinsics, Rig, load_rig, save_rig
from ..errors import FormatError, UnsupportedRate
from ..evsim.events import EventStream, concatenate, read_events, write_events
from ..evsim.mesh import TriangleMesh, make_background, make_blob_mesh
from ..evsim.render import Scene, render
from ..evsim.simulate import SimConfig, default_event_intrinsics, generate_events
from ..evtensor import WINDOW_US
from ..geom import (RigidTransform, apply_delta, PoseDelta, read_poses, rotvec_to_matrix, sample_rotation,
                    sample_sphere_direction, write_poses)

SEQUENCE_SCHEMA_VERSION = 1
SOURCE_FPS = 30
BACKGROUND_DEPTH = 1.5  # m


def tracking_rig(T_event_depth=None):
    """Small ideal-pinhole rig for synthetic sequences; depth is registered to the RGB camera."""
    rgb = Intrinsics(300.0, 300.0, 159.5, 119.5, 320, 240)
    if T_event_depth is None:
        T_event_depth = RigidTransform(rotvec_to_matrix(np.radians([2.0, -1.5, 0.5])), [0.01, 0.06, 0.0])
    return Rig(rgb, rgb, default_event_intrinsics(), RigidTransform.identity(), T_event_depth)


@dataclass(eq=False)
class Sequence:
    rig: Rig
    mesh: TriangleMesh
    poses: list  # ground truth, object -> RGB camera
    frame_times_us: np.ndarray
    events: EventStream
    rgb: list | None = None  # (H, W, 3) in [0, 1]
    depth: list | None = None  # (H, W) in m
    background: np.ndarray | None = None
    fps: float = SOURCE_FPS
    window_us: int = WINDOW_US

    @property
    def num_frames(self):
        return len(self.frame_times_us)

    def events_in_window(self, i):
        """The trailing window of events ending at frame ``i``."""
        end = int(self.frame_times_us[i])
        return self.events.slice_time(end - self.window_us, end)

    def frame(self, i):
        if self.rgb is None or self.depth is None:
            raise FormatError(f"sequence has no RGB-D frames (frame {i} requested)")
        return self.rgb[i], self.depth[i]


def frame_times(n, fps=SOURCE_FPS, window_us=WINDOW_US):
    """Frame timestamps in microseconds; the first frame sits one window after zero."""
    return np.array([window_us + round(i * 1_000_000 / fps) for i in range(n)], dtype=np.int64)


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.array([0.0, 0.0, 1.0])


def random_trajectory(rng, n_frames, max_translation=0.03, max_rotation=math.radians(25), distance=0.6,
                      radius=0.12, center_of_mass=(0.0, 0.0, 0.0)):
    """Ground-truth poses with per-frame deltas uniformly up to the given magnitudes.

    Motion directions drift smoothly, and a pull back toward the starting
    point keeps the object within ``radius`` of it most of the time.
    """
    com = np.asarray(center_of_mass, dtype=float)
    R0 = sample_rotation(rng)
    home = np.array([0.0, 0.0, distance])
    poses = [RigidTransform(R0, home - R0 @ com)]
    direction = sample_sphere_direction(rng)
    axis = sample_sphere_direction(rng)
    for _ in range(1, n_frames):
        pos = poses[-1].apply(com)
        pull = (home - pos) / radius
        direction = _unit(0.6 * direction + 0.5 * sample_sphere_direction(rng) + 0.6 * pull)
        axis = _unit(0.7 * axis + 0.5 * sample_sphere_direction(rng))
        delta = PoseDelta(direction, max_translation * rng.random(), axis, max_rotation * rng.random())
        poses.append(apply_delta(delta, poses[-1], com))
    return poses


def make_synthetic_sequence(rng, n_frames=60, mesh=None, background=None, rig=None, poses=None,
                            config=SimConfig(), render_frames=True, with_events=True, **trajectory):
    """Render a sequence: events between consecutive frames plus RGB-D frames at each pose."""
    mesh = make_blob_mesh(rng) if mesh is None else mesh
    rig = tracking_rig() if rig is None else rig
    background = make_background(rng, rig.rgb.width, rig.rgb.height) if background is None else background
    if poses is None:
        poses = random_trajectory(rng, n_frames, center_of_mass=mesh.center_of_mass, **trajectory)
    times = frame_times(len(poses), SOURCE_FPS, config.window_us)
    scene = Scene(mesh, background, BACKGROUND_DEPTH)
    T = rig.T_rgb_event
    streams = []
    if with_events:
        for i in range(1, len(poses)):
            streams.append(generate_events(scene, T @ poses[i - 1], T @ poses[i], rig.event, config,
                                           int(times[i]) - config.window_us))
    events = concatenate(streams) if streams else EventStream.empty(rig.event.width, rig.event.height)
    events.width, events.height = rig.event.width, rig.event.height
    rgb = depth = None
    if render_frames:
        rgb, depth = [], []
        for pose in poses:
            r = render(scene, pose, rig.rgb, config.ambient_ratio)
            rgb.append(r.rgb)
            depth.append(r.depth)
    return Sequence(rig, mesh, list(poses), times, events, rgb, depth, background, SOURCE_FPS, config.window_us)


def downsample_sequence(seq, target_fps):
    """Keep every 1st, 2nd or 3rd frame for 30, 15 or 10 fps; event windows stay the trailing 33 ms."""
    steps = {30: 1, 15: 2, 10: 3}
    if seq.fps != SOURCE_FPS or target_fps not in steps:
        raise UnsupportedRate(f"can only downsample {SOURCE_FPS} fps to 30, 15 or 10, "
                              f"got {seq.fps} -> {target_fps}")
    k = steps[target_fps]
    idx = list(range(0, seq.num_frames, k))
    pick = (lambda xs: None if xs is None else [xs[i] for i in idx])
    return replace(seq, poses=[seq.poses[i] for i in idx], frame_times_us=seq.frame_times_us[idx],
                   rgb=pick(seq.rgb), depth=pick(seq.depth), fps=target_fps)


# ---------------------------------------------------------------------------
# directory layout: rgb/NNNNNN.png, depth/NNNNNN.png (uint16 mm), events.evt,
# poses.txt, rig.json, mesh.npz, sequence.json


def save_mesh(path, mesh):
    np.savez(path, vertices=mesh.vertices, triangles=mesh.triangles, uv=mesh.uv, texture=mesh.texture,
             center_of_mass=mesh.center_of_mass)


def load_mesh(path):
    with np.load(path) as d:
        return TriangleMesh(d["vertices"], d["triangles"], d["uv"], d["texture"], d["center_of_mass"])


def save_sequence(root, seq):
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    if seq.rgb is not None:
        for i, (rgb, depth) in enumerate(zip(seq.rgb, seq.depth)):
            Image.fromarray(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)).save(root / "rgb" / f"{i:06d}.png")
            mm = np.clip(np.rint(np.asarray(depth) * 1000), 0, 65535).astype(np.uint16)
            Image.fromarray(mm).save(root / "depth" / f"{i:06d}.png")
    write_events(root / "events.evt", seq.events)
    write_poses(root / "poses.txt", seq.poses)
    save_rig(root / "rig.json", seq.rig)
    save_mesh(root / "mesh.npz", seq.mesh)
    meta = {"schema_version": SEQUENCE_SCHEMA_VERSION, "fps": seq.fps, "window_us": seq.window_us,
            "frame_times_us": [int(t) for t in seq.frame_times_us], "has_frames": seq.rgb is not None}
    (root / "sequence.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_sequence(root):
    root = Path(root)
    meta_path = root / "sequence.json"
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, meta_path, exc.lineno) from None
    times = np.asarray(meta["frame_times_us"], dtype=np.int64)
    poses = read_poses(root / "poses.txt")
    if len(poses) != len(times):
        raise FormatError(f"{len(poses)} poses for {len(times)} frames", root / "poses.txt")
    rgb = depth = None
    if meta.get("has_frames", True):
        rgb, depth = [], []
        for i in range(len(times)):
            rgb.append(np.asarray(Image.open(root / "rgb" / f"{i:06d}.png"), dtype=float) / 255.0)
            depth.append(np.asarray(Image.open(root / "depth" / f"{i:06d}.png"), dtype=float) / 1000.0)
    return Sequence(load_rig(root / "rig.json"), load_mesh(root / "mesh.npz"), poses, times,
                    read_events(root / "events.evt"), rgb, depth, None, meta["fps"], meta["window_us"])
