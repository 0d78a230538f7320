"""Synthetic event-camera data: meshes, rendering, event emission and datasets."""

from .events import EventStream, read_events, write_events
from .mesh import TriangleMesh, make_background, make_blob_mesh
from .render import Scene, render
from .simulate import SimConfig, add_sensor_noise, default_event_intrinsics, generate_events

__all__ = [
    "EventStream", "read_events", "write_events", "TriangleMesh", "make_background",
    "make_blob_mesh", "Scene", "render", "SimConfig", "add_sensor_noise",
    "default_event_intrinsics", "generate_events",
]
