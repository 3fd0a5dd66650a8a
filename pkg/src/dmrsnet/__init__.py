"""DMRS channel estimation: denoise, linearly interpolate, refine."""

__version__ = "0.1.0"
