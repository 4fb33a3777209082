"""Material-aware semantic RGB-D reconstruction."""

__version__ = "0.1.0"
