"""Quantized second-order federated learning: Hessian eigenvector compression and simulation."""

__version__ = "0.1.0"
