"""Generative replay with reconstruction repulsion for class-incremental learning."""

__version__ = "0.1.0"
