"""Personalized federated segmentation with local feature enhancement.

Everything numeric runs on the package's own reverse-mode autograd engine
over float64 NumPy arrays.
"""

__version__ = "0.1.0"
