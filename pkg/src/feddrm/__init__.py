"""Federated learning with a density-ratio-model dual loss: simulation engine and numerical oracles."""

__version__ = "0.1.0"
