"""Transformer + CNN text classifier trained from scratch on numpy."""
__version__ = "0.1.0"
