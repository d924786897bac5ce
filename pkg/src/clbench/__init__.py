"""Desk-scale benchmark of federated learning against consensus-based label fusion."""

__version__ = "0.1.0"
