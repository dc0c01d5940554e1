"""Unsupervised 3-D shape and pose learning from single images, on a small
numpy autodiff engine."""

__version__ = "0.1.0"
