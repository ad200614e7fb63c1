"""Tightly coupled GNSS/IMU/odometry fusion with a sliding-window smoother."""

__version__ = "0.1.0"
