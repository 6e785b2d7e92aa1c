"""Two-stage alignment of pathology image encoders with spatial gene expression."""

__version__ = "0.1.0"
