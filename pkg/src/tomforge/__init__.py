"""Cognitive chain construction, curation, and inference toolkit."""

__version__ = "0.1.0"
