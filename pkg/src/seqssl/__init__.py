"""Self-supervised MRI sequence classification from 2D slices."""

__version__ = "0.1.0"
