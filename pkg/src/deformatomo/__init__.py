"""Joint tilt-series alignment and reconstruction with a coordinate network."""

__version__ = "0.1.0"
