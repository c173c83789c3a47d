"""Joint point-cloud/image pre-training with curvature sampling and prototypes."""

__version__ = "0.1.0"
