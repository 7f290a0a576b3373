"""Weakly supervised self-distillation for image-based profiling."""

__version__ = "0.1.0"
