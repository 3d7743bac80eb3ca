"""Vibration-based finite-element model updating with local Lanczos reduced models."""

__version__ = "0.1.0"
