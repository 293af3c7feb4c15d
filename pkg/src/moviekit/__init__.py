"""Desk-scale instruction-guided image and video editing with distilled diffusion models."""

__version__ = "0.1.0"
