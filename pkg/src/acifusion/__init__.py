"""Multimodal anterior-chamber inflammation diagnosis toolkit."""

__version__ = "0.1.0"
