"""Two-stage hierarchical mask decoding for class-imbalanced segmentation,
built on a from-scratch reverse-mode autodiff core."""

__version__ = "0.1.0"
