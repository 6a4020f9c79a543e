"""Continual learning for smart-grid fault prediction: replay, distillation and prototype regularization."""

__version__ = "0.1.0"
