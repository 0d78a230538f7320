"""Minimal numpy tensor engine and the event / frame pose-regression networks."""

from .layers import Conv2d, Dropout, Fire, Flatten, Linear, MaxPool2, ReLU, Sequential, TemporalConv
from .network import (Network, NetworkSpec, build_event_net, build_frame_net, decode_pose,
                      encode_pose, event_net_spec, frame_net_spec)
from .train import (AdamState, FrameStats, compute_frame_stats, load_checkpoint, lr_schedule,
                    mirror_augment, mse_loss, normalize_frame_input, save_checkpoint, train)

__all__ = [
    "Conv2d", "Dropout", "Fire", "Flatten", "Linear", "MaxPool2", "ReLU", "Sequential",
    "TemporalConv", "Network", "NetworkSpec", "build_event_net", "build_frame_net", "decode_pose",
    "encode_pose", "event_net_spec", "frame_net_spec", "AdamState", "FrameStats",
    "compute_frame_stats", "load_checkpoint", "lr_schedule", "mirror_augment", "mse_loss",
    "normalize_frame_input", "save_checkpoint", "train",
]
