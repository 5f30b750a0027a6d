"""Desk-scale patch-as-token vision-language model toolkit."""

__version__ = "0.1.0"
