"""Per-frame pose errors, failure counting and evaluation reports."""

from __future__ import annotations

import math

import numpy as np

from ..errors import LengthMismatch
from ..geom import matrix_to_rotvec, relative_delta, rotation_error, translation_error
from .cascade import FAIL_ROTATION, FAIL_TRANSLATION

REPORT_SCHEMA_VERSION = 1


def per_frame_errors(trace, ground_truth):
    """(N, 2) array of translation error in mm and rotation error in degrees per frame."""
    if len(trace) != len(ground_truth):
        raise LengthMismatch(f"trace has {len(trace)} poses, ground truth {len(ground_truth)}")
    out = np.zeros((len(trace), 2))
    for i, (p, g) in enumerate(zip(trace, ground_truth)):
        out[i, 0] = 1000.0 * translation_error(g.translation, p.translation)
        out[i, 1] = math.degrees(rotation_error(g.rotation, p.rotation))
    return out


def failure_frames(trace, ground_truth, max_translation=FAIL_TRANSLATION, max_rotation=FAIL_ROTATION):
    """Indices of frames whose translation error exceeds ``max_translation`` (m) or rotation error ``max_rotation`` (rad).

    Traces are expected to come from a tracker that re-initializes to ground
    truth after each failure, so each listed frame is one failure event.
    """
    if len(trace) != len(ground_truth):
        raise LengthMismatch(f"trace has {len(trace)} poses, ground truth {len(ground_truth)}")
    frames = []
    for i, (p, g) in enumerate(zip(trace, ground_truth)):
        if (translation_error(g.translation, p.translation) > max_translation
                or rotation_error(g.rotation, p.rotation) > max_rotation):
            frames.append(i)
    return frames


def count_failures(trace, ground_truth, max_translation=FAIL_TRANSLATION, max_rotation=FAIL_ROTATION):
    return len(failure_frames(trace, ground_truth, max_translation, max_rotation))


def frame_motion(ground_truth, center_of_mass=(0.0, 0.0, 0.0)):
    """Ground-truth motion into each frame: (N, 2) of translation mm and rotation degrees (0 for frame 0)."""
    out = np.zeros((len(ground_truth), 2))
    for i in range(1, len(ground_truth)):
        t, R = relative_delta(ground_truth[i - 1], ground_truth[i], center_of_mass)
        out[i] = 1000.0 * np.linalg.norm(t), math.degrees(np.linalg.norm(matrix_to_rotvec(R)))
    return out


def binned_errors(errors, motion, translation_bins=(0, 10, 20, 30, 40), rotation_bins=(0, 10, 20, 30, 40)):
    """Mean / std of errors grouped by how far the object moved into each frame.

    Translation errors are grouped by translation motion (mm), rotation
    errors by rotation motion (degrees).
    """
    result = {}
    for col, key, edges in ((0, "translation_mm", translation_bins), (1, "rotation_deg", rotation_bins)):
        rows = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            sel = (motion[:, col] >= lo) & (motion[:, col] < hi)
            vals = errors[sel, col]
            rows.append({"range": [lo, hi], "count": int(sel.sum()),
                         "mean": float(vals.mean()) if vals.size else None,
                         "std": float(vals.std()) if vals.size else None})
        result[key] = rows
    return result


def sequence_report(name, trace, ground_truth, center_of_mass=(0.0, 0.0, 0.0), fps=30,
                    max_translation=FAIL_TRANSLATION, max_rotation=FAIL_ROTATION):
    errors = per_frame_errors(trace, ground_truth)
    failures = failure_frames(trace, ground_truth, max_translation, max_rotation)
    return {
        "name": name,
        "fps": fps,
        "frames": len(trace),
        "failures": len(failures),
        "failure_frames": failures,
        "mean_translation_error_mm": float(errors[:, 0].mean()) if len(errors) else 0.0,
        "mean_rotation_error_deg": float(errors[:, 1].mean()) if len(errors) else 0.0,
        "binned": binned_errors(errors, frame_motion(ground_truth, center_of_mass)),
    }


def make_report(sequences, max_translation=FAIL_TRANSLATION, max_rotation=FAIL_ROTATION):
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "thresholds": {"translation_m": max_translation, "rotation_deg": math.degrees(max_rotation)},
        "total_failures": int(sum(s["failures"] for s in sequences)),
        "total_frames": int(sum(s["frames"] for s in sequences)),
        "sequences": sequences,
    }
