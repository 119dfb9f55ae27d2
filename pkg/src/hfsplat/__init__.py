"""Differentiable Gaussian feature splatting with point-cloud pose regression."""
__version__ = "0.1.0"
