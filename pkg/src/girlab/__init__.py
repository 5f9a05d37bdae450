"""Unsupervised co-learning of registration, lesion masks and inpainting on displacement grids."""

__version__ = "0.1.0"
