"""Multi-chart flat-torus representation of genus-zero surfaces."""

__version__ = "0.1.0"
