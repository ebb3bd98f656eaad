"""Volumetric boundary detection with deeply supervised 3D networks (HED-3D, I2I-3D)."""

__version__ = "0.1.0"
