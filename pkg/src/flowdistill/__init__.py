"""Depth distillation for flow-matching action policies, at desk scale."""

__version__ = "0.1.0"
