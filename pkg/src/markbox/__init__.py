"""Checked-category and barcode extraction from scanned checkbox forms."""

from markbox.core import CategoryDictionary, CategoryId, PipelineConfig, SetKind, load_config, load_dictionary
from markbox.pipeline import Approach, Backends, ExtractionResult, evaluate, process_document

__all__ = [
    "Approach",
    "Backends",
    "CategoryDictionary",
    "CategoryId",
    "ExtractionResult",
    "PipelineConfig",
    "SetKind",
    "evaluate",
    "load_config",
    "load_dictionary",
    "process_document",
]

__version__ = "0.1.0"
