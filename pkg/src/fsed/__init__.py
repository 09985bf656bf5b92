"""Few-shot frame-level sound event detection, desk scale and reproducible."""

__version__ = "0.1.0"
