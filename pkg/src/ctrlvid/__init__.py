"""Controllable text-to-video diffusion on procedurally generated shape videos."""

__version__ = "0.1.0"
