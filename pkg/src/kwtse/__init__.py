"""Kinematic-wave constrained CNN speed-field reconstruction from probe trajectories."""

__version__ = "0.1.0"
