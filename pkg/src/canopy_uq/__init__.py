"""Uncertainty-aware canopy height regression from sparse LiDAR targets."""

__version__ = "0.1.0"
