"""Generative sequential recommendation with hierarchical lexical identifiers
and multi-granular late fusion."""

__version__ = "0.1.0"
