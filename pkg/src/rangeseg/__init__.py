"""LiDAR range-image segmentation with sim-to-real domain adaptation, on a
small numpy autodiff core."""

__version__ = "0.1.0"
