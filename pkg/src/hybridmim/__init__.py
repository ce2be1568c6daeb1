"""Hybrid masked image modeling for 3D volumes, at desk scale."""

__version__ = "0.1.0"
