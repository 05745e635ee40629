"""Patch-guided adaptive octrees and a small octree CNN autoencoder in numpy."""

__version__ = "0.1.0"
