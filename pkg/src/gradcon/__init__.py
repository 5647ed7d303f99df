"""Gradient-constraint anomaly detection with a from-scratch second-order
reverse-mode autodiff, convolutional autoencoders, and evaluation tooling."""

from . import autodiff, checkpoint, cli, data, metrics, nn, training

__all__ = ["autodiff", "checkpoint", "cli", "data", "metrics", "nn", "training"]
__version__ = "0.1.0"
