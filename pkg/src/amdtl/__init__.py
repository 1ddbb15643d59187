"""Desk-scale adaptive meta-domain transfer learning."""

__version__ = "0.1.0"
