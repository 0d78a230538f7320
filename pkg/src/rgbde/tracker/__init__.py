"""Cascade tracking, ICP annotation and evaluation."""

from .cascade import (BlurredFrameOracle, EventNetPredictor, FrameNetPredictor, OraclePredictor,
                      TrackerState, ZeroPredictor, event_step, frame_refine, track_sequence)
from .evaluate import count_failures, make_report, per_frame_errors, sequence_report
from .icp import icp_annotate, icp_register, rigid_align
from .sequence import (Sequence, downsample_sequence, load_sequence, make_synthetic_sequence,
                       save_sequence, tracking_rig)

__all__ = [
    "BlurredFrameOracle", "EventNetPredictor", "FrameNetPredictor", "OraclePredictor", "TrackerState",
    "ZeroPredictor", "event_step", "frame_refine", "track_sequence", "count_failures", "make_report",
    "per_frame_errors", "sequence_report", "icp_annotate", "icp_register", "rigid_align", "Sequence",
    "downsample_sequence", "load_sequence", "make_synthetic_sequence", "save_sequence", "tracking_rig",
]
