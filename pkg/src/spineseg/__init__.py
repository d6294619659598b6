"""Construction, analysis and search toolkit for scale-permuted segmentation networks."""

__version__ = "0.1.0"
