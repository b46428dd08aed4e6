"""Desk-scale multilingual entity-linking retrieval toolkit."""

__version__ = "0.1.0"
