"""Patch-embedding extraction from defect-inspection image folders."""

__version__ = "0.1.0"

from .config import ExtractorConfig
from .extract import extract, extract_masks

__all__ = ["ExtractorConfig", "extract", "extract_masks", "__version__"]
