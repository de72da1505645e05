"""Two-stage spatial-transition-point detection and main-transition selection."""

__version__ = "0.1.0"
