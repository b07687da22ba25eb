"""Supervised domain adaptation for hybrid keypoint-based 6-DoF pose estimation."""

__version__ = "0.1.0"
