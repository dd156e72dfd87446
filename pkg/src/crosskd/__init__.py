"""Cross-architecture knowledge distillation from a toy transformer into a toy CNN."""

__version__ = "0.1.0"
