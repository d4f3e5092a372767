"""Exact small-space laboratory for discrete-diffusion reverse samplers."""

__version__ = "0.1.0"
