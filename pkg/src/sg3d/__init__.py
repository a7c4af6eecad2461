"""Desk-scale 3D semantic scene graph prediction with oracle-assisted training."""

__version__ = "0.1.0"
