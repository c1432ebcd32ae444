"""Learning-to-Cache on a toy diffusion transformer, in numpy."""

__version__ = "0.1.0"
