"""Hierarchical predictive learning for tube-following tasks."""
__version__ = "0.1.0"
