"""Glaucoma screening pipeline engine and evaluation lab."""

__version__ = "0.1.0"
