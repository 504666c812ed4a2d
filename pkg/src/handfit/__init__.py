"""Self-supervised fitting of a parametric hand to 2D keypoints and images."""

__version__ = "0.1.0"
