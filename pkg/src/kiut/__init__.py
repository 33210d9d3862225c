"""Encoder-decoder report generation from grid region features, with clinical and contextual signals."""

__version__ = "0.1.0"
