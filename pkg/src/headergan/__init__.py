"""Synthetic packet-header trace generation with a GNN-augmented WGAN."""

__version__ = "0.1.0"
