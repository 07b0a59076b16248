"""Desk-scale laboratory for multi-language sparse-expert language modeling."""

__version__ = "0.1.0"
