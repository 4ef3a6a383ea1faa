"""Embedding extraction: prompted detector crops + vision-language
encoding, emitting cache and prior files in the plantreg formats."""

from . import backends, extract, formats, metadata

__version__ = "0.1.0"

__all__ = ["backends", "extract", "formats", "metadata", "__version__"]
