"""Contrastive-generative point-cloud captioning with test-time search."""

__version__ = "0.1.0"
