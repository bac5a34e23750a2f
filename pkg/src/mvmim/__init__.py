"""Multi-view masked image modeling with an alternating-attention backbone, on numpy."""

__version__ = "0.1.0"
