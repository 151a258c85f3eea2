"""Cascaded adversarial video generation.

A pipeline of GAN levels: level 1 generates low-resolution, temporally
subsampled videos; upscaling levels spatially upsample and temporally
interpolate them. Levels are trained greedily on partial temporal views
and applied convolutionally over full-length inputs at inference.
"""

__version__ = "0.1.0"

from .errors import AlignmentError, ConfigError, DimensionError, StateError

__all__ = [
    "AlignmentError",
    "ConfigError",
    "DimensionError",
    "StateError",
]
