"""Hierarchical multitask CTC acoustic-to-subword modeling on a small numpy core."""

__version__ = "0.1.0"
