"""Barrier-certified policy learning on biped zero dynamics."""
__version__ = "0.1.0"
