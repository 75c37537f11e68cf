"""Tangled program graphs for LiDAR-based drone navigation in a 2D forest."""

__version__ = "0.1.0"
