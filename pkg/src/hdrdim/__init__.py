"""Dual-panel HDR display simulation and backlight dimming."""

__version__ = "0.1.0"
