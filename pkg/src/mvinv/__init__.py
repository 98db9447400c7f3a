"""Multi-view and multi-latent inversion of 3D-aware generators."""

__version__ = "0.1.0"
