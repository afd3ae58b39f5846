"""Multi-zoom local descriptors for line-drawing correspondence."""

__version__ = "0.1.0"
