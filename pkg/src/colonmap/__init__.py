"""Geometry, losses and evaluation for self-supervised point-map adaptation in colonoscopy."""
__version__ = "0.1.0"
