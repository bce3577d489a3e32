"""Curvature-aware model merging driven by Adam second moments."""

__version__ = "0.1.0"
