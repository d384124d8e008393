"""Sparse-token 3D segmentation: hierarchical encoder, VQ token selection, sparse decoder."""

__version__ = "0.1.0"
