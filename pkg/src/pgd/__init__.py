"""Particle-guided diffusion sampling for PDE inverse problems."""

__version__ = "0.1.0"
