"""Controllable layer decomposition at desk scale."""

__version__ = "0.1.0"
