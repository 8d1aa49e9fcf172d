"""Controlled dialogue generation with side networks over a frozen base language model."""

__version__ = "0.1.0"
