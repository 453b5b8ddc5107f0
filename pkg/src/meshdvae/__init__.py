"""Supervised disentangled VAE over corresponded triangle meshes."""

__version__ = "0.1.0"
