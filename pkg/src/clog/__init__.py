"""Continual learning of conditional generative models: benchmark framework."""

__version__ = "0.1.0"
