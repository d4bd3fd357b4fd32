"""Bi-level LLM planning for long-term interactive recommendation."""

__version__ = "0.1.0"
