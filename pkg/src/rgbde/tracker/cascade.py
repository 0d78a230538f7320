"""Cascade tracking: an event-based pose update refined by a frame-based one."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import LengthMismatch
from ..evsim.render import Scene, render
from ..evtensor import (N_BINS, TENSOR_SIZE, WINDOW_US, build_spike_tensor, normalize, projected_bbox,
                        resize_weights)
from ..geom import (RigidTransform, delta_transform, matrix_to_rotvec, relative_delta, rotation_error,
                    rotvec_to_matrix, translation_error)
from ..nn.network import decode_pose
from ..nn.train import normalize_frame_input

FAIL_TRANSLATION = 0.03  # m
FAIL_ROTATION = math.radians(20.0)
FRAME_INPUT_SIZE = 184


@dataclass
class TrackerState:
    pose: RigidTransform  # object -> RGB camera
    frame_index: int = 0
    failed: bool = False


@dataclass(frozen=True)
class EventQuery:
    frame_index: int
    pose_event: RigidTransform  # current estimate in the event camera frame
    center_of_mass: np.ndarray


@dataclass(frozen=True)
class FrameQuery:
    frame_index: int
    pose: RigidTransform  # current estimate in the RGB camera frame
    center_of_mass: np.ndarray
    rendered: np.ndarray | None = None  # (4, S, S)
    observed: np.ndarray | None = None


# ---------------------------------------------------------------------------
# predictors: callables returning a (translation, rotation) delta about the center of mass


class EventNetPredictor:
    needs_tensor = True

    def __init__(self, net, normalizer, size=None, bins=N_BINS, window_us=WINDOW_US):
        self.net = net
        self.normalizer = normalizer
        shape = net.spec.input_shapes[0]
        self.bins = shape[0] if bins is None else bins
        self.size = shape[-1] if size is None else size
        self.window_us = window_us

    def __call__(self, tensor, query):
        x = normalize(tensor, self.normalizer).data[None]
        return decode_pose(self.net.predict(x)[0])


class FrameNetPredictor:
    needs_images = True

    def __init__(self, net, stats):
        self.net = net
        self.stats = stats
        self.size = net.spec.input_shapes[0][-1]

    def __call__(self, query):
        a = normalize_frame_input(query.rendered, self.stats)[None]
        b = normalize_frame_input(query.observed, self.stats)[None]
        return decode_pose(self.net.predict([a, b])[0])


class ZeroPredictor:
    """Always predicts no motion."""

    needs_tensor = False
    needs_images = False

    def __call__(self, *args):
        return np.zeros(3), np.eye(3)


class OraclePredictor:
    """Returns ``gain`` times the residual from the current estimate to the ground truth.

    ``poses`` are ground-truth poses in the camera frame the predictor works
    in (event frame for the event stage, RGB frame for the frame stage).
    """

    needs_tensor = False
    needs_images = False

    def __init__(self, poses, gain=1.0):
        self.poses = list(poses)
        self.gain = gain

    def residual(self, query):
        current = query.pose_event if isinstance(query, EventQuery) else query.pose
        return relative_delta(current, self.poses[query.frame_index], query.center_of_mass)

    def __call__(self, *args):
        query = args[-1]
        t, R = self.residual(query)
        if self.gain == 1.0:
            return t, R
        return self.gain * t, rotvec_to_matrix(self.gain * matrix_to_rotvec(R))


class BlurredFrameOracle(OraclePredictor):
    """Frame-stage oracle whose reach degrades with object speed, mimicking motion blur.

    The correction is the true residual with its translation and rotation
    magnitudes clipped to a capture range. The range shrinks as
    ``capture / (1 + speed / speed_ref)`` where speed is the ground-truth
    motion into the current frame.
    """

    def __init__(self, poses, center_of_mass, capture_translation=0.02, capture_rotation=math.radians(10),
                 speed_ref_translation=0.01, speed_ref_rotation=math.radians(10)):
        super().__init__(poses)
        self.com = np.asarray(center_of_mass, dtype=float)
        self.capture = (capture_translation, capture_rotation)
        self.ref = (speed_ref_translation, speed_ref_rotation)

    def capture_range(self, frame_index):
        if frame_index == 0:
            return self.capture
        t, R = relative_delta(self.poses[frame_index - 1], self.poses[frame_index], self.com)
        speed_t = float(np.linalg.norm(t))
        speed_r = float(np.linalg.norm(matrix_to_rotvec(R)))
        return (self.capture[0] / (1 + speed_t / self.ref[0]),
                self.capture[1] / (1 + speed_r / self.ref[1]))

    def __call__(self, query):
        t, R = self.residual(query)
        max_t, max_r = self.capture_range(query.frame_index)
        norm_t = float(np.linalg.norm(t))
        if norm_t > max_t:
            t = t * (max_t / norm_t)
        rv = matrix_to_rotvec(R)
        angle = float(np.linalg.norm(rv))
        if angle > max_r:
            R = rotvec_to_matrix(rv * (max_r / angle))
        return t, R


# ---------------------------------------------------------------------------
# the two stages


def event_step(pose_prev, events, t_start, T_rgb_event, K_event, predictor, center_of_mass,
               frame_index=0, window_us=WINDOW_US):
    """Event-stage estimate ``P'_t`` from ``P_{t-1}`` (both object -> RGB camera).

    The previous pose is moved into the event camera to place the crop, the
    predicted delta (event frame, about the center of mass) is applied there,
    and the result is mapped back:
    ``P'_t = T_event_rgb . dP_E . T_rgb_event . P_{t-1}``.
    """
    com = np.asarray(center_of_mass, dtype=float)
    pose_e = T_rgb_event @ pose_prev
    center = pose_e.apply(com)
    tensor = None
    if getattr(predictor, "needs_tensor", True):
        bbox = projected_bbox(center, K_event)
        tensor = build_spike_tensor(events, bbox, t_start, window_us,
                                    getattr(predictor, "bins", N_BINS), getattr(predictor, "size", TENSOR_SIZE))
    t, R = predictor(tensor, EventQuery(frame_index, pose_e, com))
    return T_rgb_event.inverse() @ delta_transform(t, R, center) @ pose_e


def crop_resize(image, bbox, size):
    """Crop a square box (zero outside the image) and resample it to ``size`` x ``size`` by area averaging."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    H, W = img.shape[:2]
    n = bbox.side
    crop = np.zeros((n, n, img.shape[2]))
    x0, y0 = bbox.x0, bbox.y0
    xa, xb = max(0, x0), min(W, x0 + n)
    ya, yb = max(0, y0), min(H, y0 + n)
    if xa < xb and ya < yb:
        crop[ya - y0:yb - y0, xa - x0:xb - x0] = img[ya:yb, xa:xb]
    Wm = resize_weights(n, size) * (size / n)
    return np.einsum("ij,jkc,lk->cil", Wm, crop, Wm, optimize=True)


def frame_inputs(pose, frame, K_rgb, mesh, background=None, size=FRAME_INPUT_SIZE):
    """(rendered, observed) 4-channel RGB-D crops around the projected object box at ``pose``."""
    center = pose.apply(mesh.center_of_mass)
    bbox = projected_bbox(center, K_rgb)
    r = render(Scene(mesh, background), pose, K_rgb)
    rendered = crop_resize(np.dstack([r.rgb, r.depth]), bbox, size)
    rgb, depth_m = frame
    observed = crop_resize(np.dstack([rgb, depth_m]), bbox, size)
    return rendered, observed


def frame_refine(pose, frame, predictor, center_of_mass, iterations=3, frame_index=0, K_rgb=None,
                 mesh=None):
    """Frame-stage refinement: ``iterations`` rounds of predict-and-left-compose.

    ``frame`` is ``(rgb (H, W, 3), depth (H, W) m)``; it and the renderer are
    only used when the predictor needs image inputs.
    """
    com = np.asarray(center_of_mass, dtype=float)
    for _ in range(iterations):
        rendered = observed = None
        if getattr(predictor, "needs_images", True):
            size = getattr(predictor, "size", FRAME_INPUT_SIZE)
            rendered, observed = frame_inputs(pose, frame, K_rgb, mesh, size=size)
        t, R = predictor(FrameQuery(frame_index, pose, com, rendered, observed))
        pose = delta_transform(t, R, pose.apply(com)) @ pose
    return pose


# ---------------------------------------------------------------------------
# whole sequences


@dataclass
class TrackResult:
    poses: list
    failures: list = field(default_factory=list)  # frame indices
    mode: str = "rgbde"

    @property
    def num_failures(self):
        return len(self.failures)


def is_failure(pose, truth, max_translation=FAIL_TRANSLATION, max_rotation=FAIL_ROTATION):
    return (translation_error(truth.translation, pose.translation) > max_translation
            or rotation_error(truth.rotation, pose.rotation) > max_rotation)


def track_sequence(seq, event_predictor, frame_predictor, mode="rgbde", reset="failure", iterations=3,
                   thresholds=(FAIL_TRANSLATION, FAIL_ROTATION)):
    """Run the tracker over a sequence starting from the ground truth at frame 0.

    ``mode`` is ``"rgbde"`` (event stage then frame stage) or ``"rgbd"``
    (frame stage only). ``reset`` is ``"failure"`` (re-initialize to ground
    truth after a failure), ``"every_frame"`` (start every frame from the
    previous ground truth) or ``"none"``.
    """
    if mode not in ("rgbde", "rgbd"):
        raise ValueError(f"mode must be 'rgbde' or 'rgbd', got {mode!r}")
    if reset not in ("failure", "every_frame", "none"):
        raise ValueError(f"unknown reset policy {reset!r}")
    gt = seq.poses
    if len(gt) != seq.num_frames:
        raise LengthMismatch(f"{len(gt)} ground-truth poses for {seq.num_frames} frames")
    com = seq.mesh.center_of_mass
    T_rgb_event = seq.rig.T_rgb_event
    state = TrackerState(gt[0], 0)
    poses, failures = [gt[0]], []
    for i in range(1, seq.num_frames):
        prev = gt[i - 1] if reset == "every_frame" else state.pose
        pose = prev
        if mode == "rgbde":
            t_end = int(seq.frame_times_us[i])
            pose = event_step(prev, seq.events_in_window(i), t_end - seq.window_us, T_rgb_event,
                              seq.rig.event, event_predictor, com, i, seq.window_us)
        frame = seq.frame(i) if getattr(frame_predictor, "needs_images", True) else None
        pose = frame_refine(pose, frame, frame_predictor, com, iterations, i, seq.rig.rgb, seq.mesh)
        poses.append(pose)
        failed = is_failure(pose, gt[i], *thresholds)
        if failed:
            failures.append(i)
        state = TrackerState(gt[i] if failed and reset == "failure" else pose, i, failed)
    return TrackResult(poses, failures, mode)
