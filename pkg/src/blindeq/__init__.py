"""Blind equalization and decoding toolkit for noisy ISI channels."""

__version__ = "0.1.0"
