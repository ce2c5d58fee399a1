"""Bi-weighted unsupervised domain adaptation for multi-output regression on voxel designs."""

__version__ = "0.1.0"
