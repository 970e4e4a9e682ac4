"""Visuo-tactile 3D Gaussian reconstruction with hull-guided pruning and
tactile anchors."""
from .camera import CameraView, Pose, look_at
from .gaussians import GaussianScene
from .render import render, render_backward

__all__ = ["CameraView", "Pose", "look_at", "GaussianScene", "render", "render_backward"]
__version__ = "0.1.0"
