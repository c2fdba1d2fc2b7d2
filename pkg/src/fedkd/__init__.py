"""Federated multi-task training and distillation on synthetic aortic-root CT."""

__version__ = "0.1.0"
