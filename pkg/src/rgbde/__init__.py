"""Event-augmented 6-DOF object tracking: calibration, event simulation, networks and evaluation."""

__version__ = "0.1.0"
