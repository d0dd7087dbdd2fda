"""Unsupervised speaker embeddings (u-vectors) from pseudo-labeled speech segments."""

__version__ = "0.1.0"
