"""Subgraph federated learning with spectral Laplacian smoothing."""

__version__ = "0.1.0"
