"""Incremental open-vocabulary 3-D instance mapping over sparse voxel sets."""

__version__ = "0.1.0"
