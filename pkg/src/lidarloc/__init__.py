"""Lidar-only odometry with segment-based relocalization against a target map."""

__version__ = "0.1.0"
