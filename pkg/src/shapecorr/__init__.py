"""Unsupervised dense 3D shape correspondence with probabilistic part embeddings."""

__version__ = "0.1.0"
