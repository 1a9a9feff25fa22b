"""Confidence-aware personalized federated learning laboratory."""

__version__ = "0.1.0"
