"""Topology generation with SIMP ground truth and latent diffusion."""
__version__ = "0.1.0"
