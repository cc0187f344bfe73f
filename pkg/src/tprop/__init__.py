"""Difference target propagation with layer-local feedback training, in numpy."""

__version__ = "0.1.0"
